if __name__ == "__main__":
    from hyperlab.main import main

    main()

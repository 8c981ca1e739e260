# retromc package initialization

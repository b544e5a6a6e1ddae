from hypothesis import settings

# single-core CI boxes make per-example deadlines flaky
settings.register_profile("default", deadline=None)
settings.load_profile("default")

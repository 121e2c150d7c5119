from .fake_source import FakeSource

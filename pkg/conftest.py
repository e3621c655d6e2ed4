"""Pytest wiring: absltest helpers (e.g. create_tempfile) read absl flags,
which are only parsed when running under absltest.main()."""
from absl import flags


def pytest_configure(config):
    if not flags.FLAGS.is_parsed():
        flags.FLAGS.mark_as_parsed()

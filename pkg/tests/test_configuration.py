import os

from repact import configuration


class TestThreadCount:
    def test_explicit_value(self):
        assert configuration._thread_count("3") == 3

    def test_zero_means_machine_default(self):
        assert configuration._thread_count("0") == (os.cpu_count() or 1)

    def test_non_integer_falls_back_with_warning(self, caplog):
        assert configuration._thread_count("many") == (os.cpu_count() or 1)
        assert "REPACT_THREADS='many'" in caplog.text


class TestLogging:
    def test_file_handler_replaced_on_second_call(self, tmp_path):
        first = configuration.enable_file_logging(str(tmp_path))
        handler = configuration._handlers["file"]
        second = configuration.enable_file_logging(str(tmp_path))
        assert os.path.dirname(first) == os.path.dirname(second) == str(tmp_path)
        assert configuration._handlers["file"] is not handler
        assert handler not in configuration.logger.handlers

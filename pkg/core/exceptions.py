"""Erros do workbench e o código de saída de cada família."""


class MedSegError(Exception):
    exit_code = 1


class InvalidArgumentError(MedSegError, ValueError):
    """Argumento fora do contrato da operação (forma, faixa, valor)."""


class ConfigError(InvalidArgumentError):
    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}

    def __str__(self):
        if not self.errors:
            return super().__str__()
        details = '; '.join(
            f"{field}: {' '.join(str(m) for m in messages)}"
            for field, messages in self.errors.items()
        )
        return f"{super().__str__()} ({details})"


class OutputExistsError(MedSegError):
    pass


class DataError(MedSegError):
    """Falha ao ler corpus, máscara ou checkpoint. Sempre cita o arquivo ou a amostra."""

    exit_code = 2

    def __init__(self, message, source=None):
        super().__init__(f"{source}: {message}" if source else message)
        self.source = source


class NumericalError(MedSegError):
    exit_code = 3

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}

import pytest
from loguru import logger


@pytest.fixture(autouse=True, scope="session")
def quiet_logging():
    logger.remove()
    logger.add(lambda msg: print(msg, end=""), level="WARNING")
    yield

from loguru import logger

logger = logger.bind(guide=True)

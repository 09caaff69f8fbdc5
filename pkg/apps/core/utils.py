import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Iterable, List, Tuple

logger = logging.getLogger(__name__)


@contextmanager
def log_duration(stage: str, log: logging.Logger = None):
    """
    Registra cuánto tarda una etapa del pipeline.
    """
    log = log or logger
    start_time = time.perf_counter()
    log.info(f"=== {stage} ===")
    try:
        yield
    finally:
        duration = time.perf_counter() - start_time
        log.info(f"{stage}: {duration:.3f}s")


def dump_json(data: Any, path) -> Path:
    """
    Escribe JSON determinista (claves ordenadas, indentación fija, salto final).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(to_json(data))
    return path


def to_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + '\n'


def load_json(path) -> Any:
    with open(path, 'r', encoding='utf-8') as handle:
        return json.load(handle)


def config_hash(data: Any) -> str:
    """Hash corto y estable de un documento de configuración."""
    digest = hashlib.sha256(json.dumps(data, sort_keys=True).encode('utf-8'))
    return digest.hexdigest()[:16]


def run_parallel(func: Callable, items: Iterable, workers: int = 1) -> List[Tuple[Any, Any, Exception]]:
    """
    Ejecuta func(item) para cada item y devuelve (item, resultado, error) en el
    orden de entrada. Con workers > 1 usa un pool de procesos acotado.

    Los errores por item no interrumpen el lote; quien llama decide qué hacer.
    """
    items = list(items)
    results = []
    if workers <= 1 or len(items) <= 1:
        for item in items:
            try:
                results.append((item, func(item), None))
            except Exception as e:
                logger.warning(f"Fallo procesando {item}: {e}")
                results.append((item, None, e))
        return results

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, item) for item in items]
        for item, future in zip(items, futures):
            try:
                results.append((item, future.result(), None))
            except Exception as e:
                logger.warning(f"Fallo procesando {item}: {e}")
                results.append((item, None, e))
    return results

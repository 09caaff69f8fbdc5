"""
Mallas de triángulos: lectura PLY (ascii / binario little-endian) y OBJ,
escritura PLY binaria y cálculo de normales por vértice.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from apps.core.exceptions import MeshParseError

logger = logging.getLogger(__name__)

PLY_TYPES = {
    'char': 'i1', 'int8': 'i1', 'uchar': 'u1', 'uint8': 'u1',
    'short': 'i2', 'int16': 'i2', 'ushort': 'u2', 'uint16': 'u2',
    'int': 'i4', 'int32': 'i4', 'uint': 'u4', 'uint32': 'u4',
    'float': 'f4', 'float32': 'f4', 'double': 'f8', 'float64': 'f8',
}


@dataclass
class Mesh:
    """Malla indexada con normales unitarias por vértice."""
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray
    name: str = ''

    @classmethod
    def from_arrays(cls, vertices, faces, vertex_normals=None, name: str = '', path=None) -> 'Mesh':
        """
        Valida índices, descarta caras degeneradas y calcula normales si faltan.
        """
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise MeshParseError("coordenadas de vértice no finitas", path)
        out_of_range = np.flatnonzero((faces < 0).any(axis=1) | (faces >= len(vertices)).any(axis=1))
        if out_of_range.size:
            bad = int(out_of_range[0])
            raise MeshParseError(
                f"la cara {bad} referencia vértices {faces[bad].tolist()} (hay {len(vertices)} vértices)", path
            )

        areas = face_areas(vertices, faces)
        degenerate = areas <= 0
        if degenerate.any():
            logger.warning(f"{name or path}: {int(degenerate.sum())} caras degeneradas descartadas")
            faces = faces[~degenerate]
        if len(faces) == 0:
            raise MeshParseError("la malla no tiene caras válidas", path)

        if vertex_normals is None:
            vertex_normals = compute_vertex_normals(vertices, faces)
        else:
            vertex_normals = _unit(np.asarray(vertex_normals, dtype=np.float64).reshape(-1, 3))
        return cls(vertices=vertices, faces=faces, vertex_normals=vertex_normals, name=name)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def translated(self, offset) -> 'Mesh':
        return Mesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces.copy(),
                    self.vertex_normals.copy(), self.name)

    def for_side(self, side: str) -> 'Mesh':
        """El reverso se ve girando la malla 180° alrededor del eje y."""
        if side == 'front':
            return self
        if side != 'back':
            raise MeshParseError(f"lado desconocido '{side}'")
        flip = np.array([-1.0, 1.0, -1.0])
        return Mesh(self.vertices * flip, self.faces.copy(), self.vertex_normals * flip, self.name)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Promedio de normales de cara ponderado por área."""
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    weighted = np.cross(b - a, c - a)
    normals = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(normals, faces[:, i], weighted)
    return _unit(normals)


def _unit(normals: np.ndarray) -> np.ndarray:
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    unit = np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)
    # vértices sin caras: normal hacia la cámara
    unit[lengths[:, 0] == 0] = (0.0, 0.0, 1.0)
    return unit


def fan_triangulate(polygon: List[int]) -> List[Tuple[int, int, int]]:
    return [(polygon[0], polygon[i], polygon[i + 1]) for i in range(1, len(polygon) - 1)]


def load_mesh(path) -> Mesh:
    path = Path(path)
    if not path.exists():
        raise MeshParseError("el archivo no existe", path)
    suffix = path.suffix.lower()
    if suffix == '.ply':
        vertices, faces, normals = _read_ply(path)
    elif suffix == '.obj':
        vertices, faces, normals = _read_obj(path)
    else:
        raise MeshParseError(f"formato no soportado '{suffix}'", path)
    mesh = Mesh.from_arrays(vertices, faces, normals, name=path.stem, path=path)
    logger.debug(f"Malla {path.name}: {len(mesh.vertices)} vértices, {mesh.face_count} caras")
    return mesh


# --- OBJ ---

def _read_obj(path: Path):
    vertices, faces = [], []
    with open(path, 'r', encoding='utf-8', errors='replace') as handle:
        for line_number, line in enumerate(handle, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith('#'):
                continue
            if tokens[0] == 'v':
                try:
                    vertices.append([float(t) for t in tokens[1:4]])
                except ValueError as e:
                    raise MeshParseError(f"vértice inválido: {e}", path, line=line_number) from e
                if len(vertices[-1]) != 3:
                    raise MeshParseError("vértice con menos de 3 coordenadas", path, line=line_number)
            elif tokens[0] == 'f':
                polygon = []
                for token in tokens[1:]:
                    try:
                        index = int(token.split('/')[0])
                    except ValueError as e:
                        raise MeshParseError(f"índice de cara inválido '{token}'", path, line=line_number) from e
                    resolved = len(vertices) + index if index < 0 else index - 1
                    if not 0 <= resolved < len(vertices):
                        raise MeshParseError(
                            f"la cara {len(faces)} referencia el vértice {index} (hay {len(vertices)} vértices)",
                            path, line=line_number,
                        )
                    polygon.append(resolved)
                if len(polygon) < 3:
                    raise MeshParseError("cara con menos de 3 vértices", path, line=line_number)
                faces.extend(fan_triangulate(polygon))
    if not vertices:
        raise MeshParseError("el OBJ no contiene vértices", path)
    return np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3), None


# --- PLY ---

@dataclass
class _PlyElement:
    name: str
    count: int
    properties: list  # (nombre, dtype) o (nombre, dtype_cuenta, dtype_item)

    @property
    def has_lists(self) -> bool:
        return any(len(prop) == 3 for prop in self.properties)

    def scalar_dtype(self) -> np.dtype:
        return np.dtype([(prop[0], '<' + prop[1]) for prop in self.properties])


def _parse_ply_header(payload: bytes, path: Path):
    match = re.search(rb'end_header\r?\n', payload)
    if not payload.startswith(b'ply') or match is None:
        raise MeshParseError("encabezado PLY inválido", path, line=1)
    header = payload[:match.start()].decode('ascii', errors='replace').splitlines()
    fmt, elements = None, []
    for line_number, line in enumerate(header, start=1):
        tokens = line.split()
        if not tokens or tokens[0] in ('ply', 'comment', 'obj_info'):
            continue
        try:
            if tokens[0] == 'format':
                fmt = tokens[1]
            elif tokens[0] == 'element':
                elements.append(_PlyElement(tokens[1], int(tokens[2]), []))
            elif tokens[0] == 'property':
                if tokens[1] == 'list':
                    elements[-1].properties.append((tokens[4], PLY_TYPES[tokens[2]], PLY_TYPES[tokens[3]]))
                else:
                    elements[-1].properties.append((tokens[2], PLY_TYPES[tokens[1]]))
        except (IndexError, KeyError, ValueError) as e:
            raise MeshParseError(f"línea de encabezado inválida '{line}'", path, line=line_number) from e
    if fmt not in ('ascii', 'binary_little_endian'):
        raise MeshParseError(f"formato PLY no soportado '{fmt}'", path)
    return fmt, elements, match.end(), len(header) + 2


def _read_ply(path: Path):
    payload = path.read_bytes()
    fmt, elements, body_offset, body_line = _parse_ply_header(payload, path)
    names = [element.name for element in elements]
    if 'vertex' not in names or 'face' not in names:
        raise MeshParseError("el PLY necesita elementos 'vertex' y 'face'", path)
    if fmt == 'ascii':
        data = _read_ply_ascii(payload[body_offset:], elements, path, body_line)
    else:
        data = _read_ply_binary(payload, body_offset, elements, path)

    vertex = data['vertex']
    try:
        vertices = np.stack([vertex['x'], vertex['y'], vertex['z']], axis=1).astype(np.float64)
    except (KeyError, ValueError) as e:
        raise MeshParseError(f"vértices sin coordenadas x/y/z ({e})", path) from e
    normals = None
    if all(key in vertex.dtype.names for key in ('nx', 'ny', 'nz')):
        normals = np.stack([vertex['nx'], vertex['ny'], vertex['nz']], axis=1).astype(np.float64)

    faces, locations = data['face']
    if isinstance(faces, np.ndarray):
        rows = np.flatnonzero(((faces < 0) | (faces >= len(vertices))).any(axis=1))
        first_bad = int(rows[0]) if rows.size else None
    else:
        first_bad = next((i for i, face in enumerate(faces)
                          if any(not 0 <= v < len(vertices) for v in face)), None)
    if first_bad is not None:
        bad = [int(v) for v in faces[first_bad] if not 0 <= v < len(vertices)]
        line, offset = locations(first_bad)
        raise MeshParseError(
            f"la cara {first_bad} referencia el vértice {bad[0]} (hay {len(vertices)} vértices)",
            path, line=line, offset=offset,
        )
    if isinstance(faces, np.ndarray):
        triangles = faces
    else:
        triangles = [tri for face in faces for tri in fan_triangulate(face)]
    return vertices, np.asarray(triangles, dtype=np.int64).reshape(-1, 3), normals


def _read_ply_ascii(body: bytes, elements, path: Path, first_line: int):
    lines = body.decode('ascii', errors='replace').splitlines()
    cursor = 0
    data = {}
    for element in elements:
        start_line = first_line + cursor
        chunk = lines[cursor:cursor + element.count]
        if len(chunk) < element.count:
            raise MeshParseError(f"faltan filas del elemento '{element.name}'", path,
                                 line=first_line + len(lines))
        cursor += element.count
        if element.name == 'face':
            faces = []
            for row, line in enumerate(chunk):
                tokens = line.split()
                try:
                    n = int(tokens[0])
                    polygon = [int(t) for t in tokens[1:1 + n]]
                except (IndexError, ValueError) as e:
                    raise MeshParseError(f"cara {row} inválida", path, line=start_line + row) from e
                if len(polygon) != n or n < 3:
                    raise MeshParseError(f"cara {row} con {len(polygon)} índices", path, line=start_line + row)
                faces.append(polygon)
            data['face'] = (faces, lambda i, s=start_line: (s + i, None))
        elif element.name == 'vertex':
            if element.has_lists:
                raise MeshParseError("propiedades lista en vértices no soportadas", path, line=start_line)
            records = np.zeros(element.count, dtype=element.scalar_dtype())
            for row, line in enumerate(chunk):
                tokens = line.split()
                if len(tokens) < len(element.properties):
                    raise MeshParseError(f"vértice {row} incompleto", path, line=start_line + row)
                try:
                    records[row] = tuple(float(t) for t in tokens[:len(element.properties)])
                except ValueError as e:
                    raise MeshParseError(f"vértice {row}: {e}", path, line=start_line + row) from e
            data['vertex'] = records
    return data


def _read_ply_binary(payload: bytes, offset: int, elements, path: Path):
    data = {}
    for element in elements:
        if not element.has_lists:
            dtype = element.scalar_dtype()
            size = dtype.itemsize * element.count
            if offset + size > len(payload):
                raise MeshParseError(f"elemento '{element.name}' truncado", path, offset=offset)
            data[element.name] = np.frombuffer(payload, dtype=dtype, count=element.count, offset=offset)
            offset += size
            continue
        if element.name != 'face':
            offset = _skip_list_element(payload, offset, element, path)
            continue
        faces, offset, locations = _read_binary_faces(payload, offset, element, path)
        data['face'] = (faces, locations)
    return data


def _read_binary_faces(payload: bytes, offset: int, element: _PlyElement, path: Path):
    if len(element.properties) == 1:
        _, count_type, item_type = element.properties[0]
        record = np.dtype([('n', '<' + count_type), ('v', '<' + item_type, (3,))])
        size = record.itemsize * element.count
        if offset + size <= len(payload):
            records = np.frombuffer(payload, dtype=record, count=element.count, offset=offset)
            if np.all(records['n'] == 3):
                start = offset
                return records['v'].astype(np.int64), offset + size, \
                    lambda i: (None, start + i * record.itemsize)

    starts, faces = [], []
    for row in range(element.count):
        starts.append(offset)
        polygon = None
        for prop in element.properties:
            if len(prop) == 3:
                count_dtype, item_dtype = np.dtype('<' + prop[1]), np.dtype('<' + prop[2])
                if offset + count_dtype.itemsize > len(payload):
                    raise MeshParseError(f"cara {row} truncada", path, offset=offset)
                n = int(np.frombuffer(payload, dtype=count_dtype, count=1, offset=offset)[0])
                offset += count_dtype.itemsize
                if offset + n * item_dtype.itemsize > len(payload):
                    raise MeshParseError(f"cara {row} truncada", path, offset=offset)
                values = np.frombuffer(payload, dtype=item_dtype, count=n, offset=offset).tolist()
                offset += n * item_dtype.itemsize
                if prop[0] in ('vertex_indices', 'vertex_index'):
                    polygon = values
            else:
                offset += np.dtype(prop[1]).itemsize
        if polygon is None or len(polygon) < 3:
            raise MeshParseError(f"cara {row} sin índices válidos", path, offset=starts[-1])
        faces.append(polygon)
    return faces, offset, lambda i: (None, starts[i])


def _skip_list_element(payload: bytes, offset: int, element: _PlyElement, path: Path) -> int:
    for _ in range(element.count):
        for prop in element.properties:
            if len(prop) == 3:
                count_dtype, item_dtype = np.dtype('<' + prop[1]), np.dtype('<' + prop[2])
                if offset + count_dtype.itemsize > len(payload):
                    raise MeshParseError(f"elemento '{element.name}' truncado", path, offset=offset)
                n = int(np.frombuffer(payload, dtype=count_dtype, count=1, offset=offset)[0])
                offset += count_dtype.itemsize + n * item_dtype.itemsize
            else:
                offset += np.dtype(prop[1]).itemsize
    return offset


def save_ply(mesh: Mesh, path) -> Path:
    """Escribe PLY binario little-endian con posiciones y normales en double."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = '\n'.join([
        'ply',
        'format binary_little_endian 1.0',
        f'element vertex {len(mesh.vertices)}',
        'property double x', 'property double y', 'property double z',
        'property double nx', 'property double ny', 'property double nz',
        f'element face {mesh.face_count}',
        'property list uchar int vertex_indices',
        'end_header',
    ]) + '\n'
    vertex = np.empty(len(mesh.vertices), dtype=[(k, '<f8') for k in ('x', 'y', 'z', 'nx', 'ny', 'nz')])
    for i, key in enumerate(('x', 'y', 'z')):
        vertex[key] = mesh.vertices[:, i]
        vertex['n' + key] = mesh.vertex_normals[:, i]
    face = np.empty(mesh.face_count, dtype=[('n', 'u1'), ('v', '<i4', (3,))])
    face['n'] = 3
    face['v'] = mesh.faces
    with open(path, 'wb') as handle:
        handle.write(header.encode('ascii'))
        handle.write(vertex.tobytes())
        handle.write(face.tobytes())
    return path

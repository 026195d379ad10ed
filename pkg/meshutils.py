#!/usr/bin/env python

'''
meshutils.py - triangle meshes for the canonical body and cloth layers.

====================
    TriMesh
    edges_from_faces
    vertex_normals
    read_obj
    write_obj
====================
'''

import os
import logging
from datetime import datetime

import numpy as np

LOGGER = logging.getLogger(__name__)


class InvalidMesh(ValueError):
    pass


def edges_from_faces(faces):
    '''
    Unique unordered edges (i < j) of a triangle list, sorted
    lexicographically.
    '''
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def vertex_normals(vertices, faces):
    '''
    Area-weighted vertex normals, normalized. Vertices on no face get a zero
    normal, which init_from_mesh rejects.
    '''
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    normals = np.zeros_like(vertices)
    if faces.shape[0] > 0:
        v0, v1, v2 = (vertices[faces[:, 0]], vertices[faces[:, 1]],
                      vertices[faces[:, 2]])
        fn = np.cross(v1 - v0, v2 - v0)
        for k in range(3):
            np.add.at(normals, faces[:, k], fn)
    norms = np.linalg.norm(normals, axis=1)
    good = norms > 0
    normals[good] /= norms[good, None]
    return normals


class TriMesh(object):
    '''
    A triangle mesh in meters.

    Args:
        vertices (np.ndarray): N x 3 positions.
        faces (np.ndarray): F x 3 vertex indices.
        normals (np.ndarray or None): N x 3 outward normals. Computed from the
        faces if None.
        colors (np.ndarray or None): N x 3 rgb in [0,1].
        edges (np.ndarray or None): E x 2 unique unordered index pairs.
        Derived from the faces if None.
    '''

    def __init__(self, vertices, faces, normals=None, colors=None,
                 edges=None):

        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        nv = self.vertices.shape[0]

        if self.faces.size and (self.faces.min() < 0 or
                                self.faces.max() >= nv):
            raise InvalidMesh('face index out of range for %d vertices' % nv)

        if edges is None:
            self.edges = edges_from_faces(self.faces)
        else:
            self.edges = np.unique(
                np.sort(np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                        axis=1), axis=0
            )
        if self.edges.size and (self.edges.min() < 0 or
                                self.edges.max() >= nv):
            raise InvalidMesh('edge index out of range for %d vertices' % nv)

        if normals is None:
            self.normals = vertex_normals(self.vertices, self.faces)
        else:
            self.normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)

        self.colors = (None if colors is None else
                       np.asarray(colors, dtype=np.float64).reshape(-1, 3))

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def with_vertices(self, vertices, recompute_normals=True):
        '''
        Same topology and colors, new positions.
        '''
        return TriMesh(vertices, self.faces,
                       normals=None if recompute_normals else self.normals,
                       colors=self.colors, edges=self.edges)

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return np.sqrt(np.sum(d*d, axis=1))

    def mean_incident_edge_length(self):
        '''
        Per-vertex mean length of incident edges; nan where a vertex has no
        edge.
        '''
        nv = self.n_vertices
        lengths = self.edge_lengths()
        total = np.zeros(nv)
        count = np.zeros(nv)
        for k in range(2):
            np.add.at(total, self.edges[:, k], lengths)
            np.add.at(count, self.edges[:, k], 1.0)
        with np.errstate(invalid='ignore', divide='ignore'):
            return total / count


def write_obj(mesh, path):
    '''
    Writes v (with rgb columns if the mesh has colors), vn, and f v//vn lines.
    '''
    with open(path, 'w') as outfd:
        outfd.write('# layered splatting mesh, %d vertices\n' % mesh.n_vertices)
        for i, v in enumerate(mesh.vertices):
            if mesh.colors is not None:
                c = mesh.colors[i]
                outfd.write('v %.9g %.9g %.9g %.6g %.6g %.6g\n' %
                            (v[0], v[1], v[2], c[0], c[1], c[2]))
            else:
                outfd.write('v %.9g %.9g %.9g\n' % (v[0], v[1], v[2]))
        for n in mesh.normals:
            outfd.write('vn %.9g %.9g %.9g\n' % (n[0], n[1], n[2]))
        for f in mesh.faces + 1:
            outfd.write('f %d//%d %d//%d %d//%d\n' %
                        (f[0], f[0], f[1], f[1], f[2], f[2]))
    return path


def read_obj(path):
    '''
    Reads an OBJ with v/vn/f lines (triangles only). Vertex normals are
    matched to vertices through the face references; rgb after the xyz of a
    v line is read as vertex color.
    '''
    if not os.path.exists(path):
        raise InvalidMesh('mesh file does not exist: %s' % path)

    verts, cols, vns, faces, face_ns = [], [], [], [], []

    with open(path) as infd:
        for line in infd:
            parts = line.split()
            if not parts or parts[0].startswith('#'):
                continue
            if parts[0] == 'v':
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    cols.append([float(x) for x in parts[4:7]])
            elif parts[0] == 'vn':
                vns.append([float(x) for x in parts[1:4]])
            elif parts[0] == 'f':
                if len(parts) != 4:
                    raise InvalidMesh('only triangle faces are supported: %s'
                                      % line.strip())
                vi, ni = [], []
                for token in parts[1:]:
                    fields = token.split('/')
                    vi.append(int(fields[0]) - 1)
                    if len(fields) == 3 and fields[2]:
                        ni.append(int(fields[2]) - 1)
                faces.append(vi)
                if len(ni) == 3:
                    face_ns.append(ni)

    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)

    normals = None
    if vns and len(face_ns) == len(faces):
        vns = np.array(vns, dtype=np.float64)
        normals = np.zeros_like(verts)
        face_ns = np.array(face_ns, dtype=np.int64)
        for k in range(3):
            normals[faces[:, k]] = vns[face_ns[:, k]]

    colors = None
    if cols and len(cols) == len(verts):
        colors = np.array(cols, dtype=np.float64)

    LOGGER.debug('%sZ: read %d vertices, %d faces from %s' %
                 (datetime.utcnow().isoformat(), len(verts), len(faces), path))

    return TriMesh(verts, faces, normals=normals, colors=colors)

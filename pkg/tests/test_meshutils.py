import numpy as np
import pytest

from meshutils import (TriMesh, InvalidMesh, edges_from_faces,
                       vertex_normals, write_obj, read_obj)


def _square():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return verts, faces


def test_edges_are_unique_and_sorted():
    _, faces = _square()
    edges = edges_from_faces(faces)
    np.testing.assert_array_equal(
        edges, [[0, 1], [0, 2], [0, 3], [1, 2], [2, 3]]
    )


def test_vertex_normals_of_flat_square_point_up():
    verts, faces = _square()
    np.testing.assert_allclose(vertex_normals(verts, faces),
                               np.tile([0.0, 0.0, 1.0], (4, 1)))


def test_face_index_out_of_range():
    verts, _ = _square()
    with pytest.raises(InvalidMesh):
        TriMesh(verts, [[0, 1, 7]])


def test_mean_incident_edge_length_with_explicit_boundary_edges():
    verts, faces = _square()
    mesh = TriMesh(verts, faces, edges=[[0, 1], [1, 2], [2, 3], [3, 0]])
    np.testing.assert_allclose(mesh.mean_incident_edge_length(), np.ones(4))


def test_with_vertices_keeps_topology():
    verts, faces = _square()
    mesh = TriMesh(verts, faces)
    moved = mesh.with_vertices(verts*2.0)
    np.testing.assert_array_equal(moved.edges, mesh.edges)
    np.testing.assert_allclose(moved.edge_lengths(), 2.0*mesh.edge_lengths())


def test_obj_file_keeps_geometry_and_colors(tmp_path):
    verts, faces = _square()
    colors = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0.5, 0.5, 0.5]])
    path = str(tmp_path / 'square.obj')
    write_obj(TriMesh(verts, faces, colors=colors), path)
    back = read_obj(path)
    np.testing.assert_allclose(back.vertices, verts)
    np.testing.assert_array_equal(back.faces, faces)
    np.testing.assert_allclose(back.colors, colors)
    np.testing.assert_allclose(back.normals, np.tile([0, 0, 1.0], (4, 1)))


def test_missing_obj_file(tmp_path):
    with pytest.raises(InvalidMesh):
        read_obj(str(tmp_path / 'nope.obj'))

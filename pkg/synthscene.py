#!/usr/bin/env python

'''
synthscene.py - procedural ground truth for fitting: a tube-built humanoid
on the skeleton, a skirt around its hips and legs that swings with the
walk, a textured ground plane with background blobs, orbiting cameras, and
the images and cloth masks rendered from the ground-truth splats.

The body and cloth are bound to the skeleton by linear blend skinning; the
per-frame cloth meshes (LBS plus an analytic swing) stand in for a cloth
simulator's output.

Frames split 80/10/10: frame k goes to validation when k % 8 == 3, to the
held-out test set when k % 8 == 7, and to training otherwise.

A scene directory holds:

    frames/frame_NNNN.png     8-bit ground-truth images
    masks/mask_NNNN.png       16-bit cloth masks
    cameras.json              one camera per frame
    meshes/body_rest.obj, meshes/cloth_rest.obj, meshes/cloth_NNNN.obj
    skeleton.json             skeleton and the per-frame poses
    weights/body_weights.npy, weights/cloth_weights.npy
    scene_splats.lgs          ground-truth scene layer
    scene.json                seed, settings and human boxes

====================
    SyntheticScene
    split_frames
    body_mesh_on_skeleton
    skirt_mesh
    ground_and_blobs
    synth_scene
    gt_world
    human_box
    write_scene_dir
    load_scene
====================
'''

import os
import json
import logging
from glob import glob
from datetime import datetime

import numpy as np
from scipy.special import logit

import shared_variables as sv
from meshutils import TriMesh, write_obj, read_obj
from gaussians import (GaussianLayer, LayerTag, init_from_mesh,
                       quat_to_matrix, write_layer, read_layer)
from skeleton import (HUMANOID_JOINTS, SkinWeights, humanoid_skeleton,
                      walk_pose, forward_kinematics, blend_transforms,
                      lbs_apply, transfer_skin_weights,
                      write_skeleton_json, read_skeleton_json)
import renderer as rd
import imageutils as iu

LOGGER = logging.getLogger(__name__)

GT_OPACITY = 0.9
SKIN_RGB = (0.86, 0.66, 0.52)
SKIRT_RGB = ((0.75, 0.18, 0.22), (0.95, 0.85, 0.35))
GROUND_RGB = ((0.35, 0.42, 0.30), (0.55, 0.60, 0.45))
TUBE_SEGMENTS = 8
SKIRT_SEGMENTS = 24
SKIRT_TOP, SKIRT_HEM = 1.0, 0.55
SKIRT_TOP_RADIUS, SKIRT_HEM_RADIUS = 0.19, 0.32
SWING_GAIN = 0.12
WALK_CYCLES = 2.0
FRAME_SPLITS = ('train', 'val', 'test')

# tube radius for the bone ending at the named joint
BONE_RADII = {'spine': 0.13, 'l_hip': 0.07, 'r_hip': 0.07,
              'l_knee': 0.065, 'r_knee': 0.065, 'neck': 0.10,
              'l_shoulder': 0.06, 'r_shoulder': 0.06,
              'l_elbow': 0.045, 'r_elbow': 0.045, 'head': 0.05,
              'l_ankle': 0.05, 'r_ankle': 0.05, 'l_wrist': 0.04,
              'r_wrist': 0.04}
# radius of the stub grown past a leaf joint
LEAF_RADII = {'head': 0.09, 'l_knee': 0.05, 'r_knee': 0.05,
              'l_elbow': 0.04, 'r_elbow': 0.04}
DEFAULT_RADIUS = 0.03


class SyntheticScene(object):
    '''
    Ground truth for one fitting run. Frame-indexed members (poses, cameras,
    cloth_vertices, images, masks, human_boxes) share their length.
    '''

    def __init__(self, skeleton, body_mesh, cloth_mesh, body_weights,
                 cloth_weights, poses, cloth_vertices, cameras, images,
                 masks, scene_layer, human_boxes, seed,
                 background=(0.0, 0.0, 0.0)):
        self.skeleton = skeleton
        self.body_mesh = body_mesh
        self.cloth_mesh = cloth_mesh
        self.body_weights = body_weights
        self.cloth_weights = cloth_weights
        self.poses = list(poses)
        self.cloth_vertices = np.asarray(cloth_vertices, dtype=np.float64)
        self.cameras = list(cameras)
        self.images = np.asarray(images, dtype=np.float64)
        self.masks = np.asarray(masks, dtype=bool)
        self.scene_layer = scene_layer
        self.human_boxes = np.asarray(human_boxes, dtype=np.int64)
        self.seed = int(seed)
        self.background = np.asarray(background, dtype=np.float64)

        n = len(self.poses)
        for name in ('cloth_vertices', 'images', 'masks', 'human_boxes'):
            if len(getattr(self, name)) != n:
                raise ValueError('%s has %d entries for %d frames'
                                 % (name, len(getattr(self, name)), n))
        if len(self.cameras) != n:
            raise ValueError('%d cameras for %d frames'
                             % (len(self.cameras), n))

    @property
    def frame_count(self):
        return len(self.poses)

    def frame(self, k):
        return {'index': k, 'pose': self.poses[k], 'camera': self.cameras[k],
                'image': self.images[k], 'mask': self.masks[k],
                'cloth_vertices': self.cloth_vertices[k],
                'human_box': self.human_boxes[k]}

    def split(self, name):
        return split_frames(self.frame_count)[name]


def split_frames(frame_count):
    '''
    {'train': [...], 'val': [...], 'test': [...]} frame indices.
    '''
    splits = {name: [] for name in FRAME_SPLITS}
    for k in range(frame_count):
        if k % 8 == 3:
            splits['val'].append(k)
        elif k % 8 == 7:
            splits['test'].append(k)
        else:
            splits['train'].append(k)
    return splits


############
## MESHES ##
############

def _tube(a, b, radius_a, radius_b, rings, segments):
    '''
    Open tube of rings x segments vertices from a to b. Returns (vertices,
    faces, t) where t in [0,1] is each vertex's position along the axis.
    '''
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    axis /= np.linalg.norm(axis)
    helper = (np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9
              else np.array([0.0, 0.0, 1.0]))
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)

    t = np.linspace(0.0, 1.0, rings)
    phi = 2.0*np.pi*np.arange(segments)/segments
    radius = radius_a + (radius_b - radius_a)*t
    ring = np.cos(phi)[:, None]*u + np.sin(phi)[:, None]*v

    verts = (a + t[:, None, None]*(b - a) +
             radius[:, None, None]*ring[None, :, :]).reshape(-1, 3)

    faces = []
    for i in range(rings - 1):
        for k in range(segments):
            k1 = (k + 1) % segments
            v00, v01 = i*segments + k, i*segments + k1
            v10, v11 = (i+1)*segments + k, (i+1)*segments + k1
            faces.append((v00, v10, v01))
            faces.append((v01, v10, v11))
    return verts, np.array(faces, dtype=np.int64), np.repeat(t, segments)


def _leaf_tip(skeleton, j):
    '''
    Where the stub past leaf joint j ends: the next joint of the full
    humanoid table if it has one, else 0.15 m along the incoming bone.
    '''
    name = skeleton.names[j]
    world = skeleton.rest_world_origins
    for jname, parent, pos in HUMANOID_JOINTS:
        if parent >= 0 and HUMANOID_JOINTS[parent][0] == name:
            return np.asarray(pos, dtype=np.float64)
    p = skeleton.parents[j]
    direction = world[j] - world[p] if p >= 0 else np.array([0.0, 1.0, 0.0])
    direction /= np.linalg.norm(direction)
    return world[j] + 0.15*direction


def _bones(skeleton):
    '''
    (start, end, radius, driving joint, joint blended in near the end or
    None) for every bone and every leaf stub.
    '''
    world = skeleton.rest_world_origins
    children = set(p for p in skeleton.parents if p >= 0)
    bones = []
    for j in range(1, skeleton.joint_count):
        p = skeleton.parents[j]
        radius = BONE_RADII.get(skeleton.names[j], DEFAULT_RADIUS)
        bones.append((world[p], world[j], radius, p, j))
    for j in range(skeleton.joint_count):
        if j in children:
            continue
        radius = LEAF_RADII.get(skeleton.names[j], DEFAULT_RADIUS)
        bones.append((world[j], _leaf_tip(skeleton, j), radius, j, None))
    return bones


def body_mesh_on_skeleton(skeleton, n_vertices, rng):
    '''
    Tubes around every bone, with roughly n_vertices vertices shared out by
    tube surface area. Returns (TriMesh, SkinWeights): each tube follows its
    driving joint and blends half-way into the next joint over its far half.
    '''
    bones = _bones(skeleton)
    areas = np.array([np.linalg.norm(b - a)*r for a, b, r, _, _ in bones])
    share = areas/areas.sum()*n_vertices

    J = skeleton.joint_count
    verts, faces, weights = [], [], []
    offset = 0
    for (a, b, r, jd, jb), n in zip(bones, share):
        rings = max(2, int(round(n/TUBE_SEGMENTS)))
        v, f, t = _tube(a, b, r, r, rings, TUBE_SEGMENTS)
        w = np.zeros((v.shape[0], J))
        blend = 0.5*np.maximum(0.0, 2.0*t - 1.0) if jb is not None else 0.0*t
        w[:, jd] = 1.0 - blend
        if jb is not None:
            w[:, jb] += blend
        verts.append(v)
        faces.append(f + offset)
        weights.append(w)
        offset += v.shape[0]

    verts = np.concatenate(verts)
    jitter = rng.uniform(-0.04, 0.04, size=(verts.shape[0], 1))
    colors = np.clip(np.array(SKIN_RGB) + jitter, 0.0, 1.0)
    mesh = TriMesh(verts, np.concatenate(faces), colors=colors)
    return mesh, SkinWeights(np.concatenate(weights))


def skirt_mesh(n_vertices, rng):
    '''
    Open conical skirt from the waist to above the knees with vertical
    stripes.
    '''
    rings = max(2, int(round(n_vertices/SKIRT_SEGMENTS)))
    v, f, t = _tube((0.0, SKIRT_TOP, 0.0), (0.0, SKIRT_HEM, 0.0),
                    SKIRT_TOP_RADIUS, SKIRT_HEM_RADIUS, rings, SKIRT_SEGMENTS)
    stripe = (np.arange(v.shape[0]) % SKIRT_SEGMENTS) // 3 % 2
    colors = np.array(SKIRT_RGB)[stripe]
    colors = np.clip(colors + rng.uniform(-0.03, 0.03, size=(v.shape[0], 1)),
                     0.0, 1.0)
    return TriMesh(v, f, colors=colors)


def ground_and_blobs(n_splats, rng):
    '''
    Ground-truth scene layer: a checkered ground grid under the figure
    (two thirds of the splats) and large blobs on a far ring outside the
    camera orbit.
    '''
    n_ground = max(4, int(round(2*n_splats/3)))
    side = max(2, int(round(np.sqrt(n_ground))))
    xs = np.linspace(-2.0, 2.0, side)
    gx, gz = np.meshgrid(xs, xs, indexing='ij')
    verts = np.stack([gx.ravel(), np.zeros(side*side), gz.ravel()], axis=1)
    faces = []
    for i in range(side - 1):
        for k in range(side - 1):
            v00, v01 = i*side + k, i*side + k + 1
            v10, v11 = (i+1)*side + k, (i+1)*side + k + 1
            faces.append((v00, v01, v10))
            faces.append((v01, v11, v10))
    checker = ((np.floor(gx.ravel()*2.0) + np.floor(gz.ravel()*2.0))
               % 2).astype(np.int64)
    colors = np.array(GROUND_RGB)[checker]
    ground = init_from_mesh(TriMesh(verts, np.array(faces), colors=colors),
                            LayerTag.Scene)

    n_blobs = max(1, n_splats - side*side)
    angle = rng.uniform(0.0, 2.0*np.pi, n_blobs)
    radius = rng.uniform(5.0, 6.0, n_blobs)
    centers = np.stack([radius*np.cos(angle), rng.uniform(0.0, 2.5, n_blobs),
                        radius*np.sin(angle)], axis=1)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n_blobs, 1))
    log_scales = np.log(np.tile(rng.uniform(0.2, 0.4, (n_blobs, 1)), (1, 3)))
    sh = np.zeros((n_blobs, sv.SH_NCOEFFS, 3))
    sh[:, 0, :] = (rng.uniform(0.2, 0.9, (n_blobs, 3)) - 0.5)/sv.SH_C0

    layer = GaussianLayer(
        LayerTag.Scene,
        np.concatenate([ground.centers, centers]),
        np.concatenate([ground.quats, quats]),
        np.concatenate([ground.log_scales, log_scales]),
        np.full(len(ground) + n_blobs, float(logit(GT_OPACITY))),
        np.concatenate([ground.sh, sh]),
    )
    return layer


##################
## GROUND TRUTH ##
##################

def gt_world(layer, weights, transforms, centers=None):
    '''
    World Gaussians of a ground-truth layer: frames carried by the blended
    skinning transforms, centers by LBS unless given.
    '''
    W = getattr(weights, 'matrix', weights)[layer.skin_binding]
    R = quat_to_matrix(layer.quats)
    if np.array_equal(transforms, np.broadcast_to(np.eye(4),
                                                  transforms.shape)):
        mu = layer.centers.copy() if centers is None else centers
    else:
        M, _ = blend_transforms(W, transforms)
        mu = lbs_apply(layer.centers, W, transforms) if centers is None \
            else centers
        R = M @ R
    return rd.WorldGaussians(mu, R, np.exp(layer.log_scales),
                             layer.opacities, layer.sh)


def swing_offsets(rest_vertices, pose, skeleton):
    '''
    Lateral hem swing: kappa h^2 times the left-hip flexion, h the
    normalized depth below the waist.
    '''
    names = skeleton.names
    flex = (pose.joint_rotations[names.index('l_hip'), 0]
            if 'l_hip' in names else 0.0)
    h = np.clip((SKIRT_TOP - rest_vertices[:, 1])/(SKIRT_TOP - SKIRT_HEM),
                0.0, 1.0)
    offsets = np.zeros_like(rest_vertices)
    offsets[:, 0] = SWING_GAIN*h*h*flex
    return offsets


def human_box(body, cloth, scene, camera, settings):
    '''
    (row0, row1, col0, col1), half-open, bounding the pixels where the human
    (body and cloth) covers more than half; the full frame when nothing does.
    '''
    world = rd.concat_world([body, cloth, scene])
    override = np.zeros((len(world), 1))
    override[:len(body) + len(cloth)] = 1.0
    out, _ = rd.render_gaussians(world, camera, np.zeros(1),
                                 settings=settings, color_override=override)
    rows, cols = np.nonzero(out.rgb[:, :, 0] > 0.5)
    if rows.size == 0:
        return np.array([0, camera.height, 0, camera.width])
    return np.array([rows.min(), rows.max() + 1, cols.min(), cols.max() + 1])


def _orbit_camera(k, frames, cfg):
    sc = cfg['scene']
    res = int(sc['resolution'])
    angle = 2.0*np.pi*k/max(frames, 1)
    eye = (sc['camera_radius']*np.sin(angle), sc['camera_height'],
           sc['camera_radius']*np.cos(angle))
    return rd.look_at_camera(eye, (0.0, 0.9, 0.0), res, res,
                             sc['focal_factor']*res)


def synth_scene(cfg, seed=None, settings=None):
    '''
    Builds the ground-truth scene from the 'scene' config section. The same
    seed always gives the same arrays.
    '''
    sc = cfg['scene']
    seed = int(sc['seed'] if seed is None else seed)
    rng = np.random.default_rng(seed)
    settings = settings or rd.RenderSettings.from_config(cfg)
    background = np.asarray(cfg['render']['background'], dtype=np.float64)
    frames = int(sc['frames'])

    skeleton = humanoid_skeleton(int(sc['joints']))
    body_mesh, body_weights = body_mesh_on_skeleton(skeleton,
                                                    int(sc['n_body']), rng)
    cloth_mesh = skirt_mesh(int(sc['n_cloth']), rng)
    cloth_weights = transfer_skin_weights(cloth_mesh, body_mesh,
                                          body_weights)
    scene_layer = ground_and_blobs(int(sc['n_scene']), rng)

    body_gt = init_from_mesh(body_mesh, LayerTag.Body)
    cloth_gt = init_from_mesh(cloth_mesh, LayerTag.Cloth)
    for layer in (body_gt, cloth_gt):
        layer.opacity_logits[:] = logit(GT_OPACITY)
    scene_world = rd.world_from_layer(scene_layer)

    LOGGER.info('%sZ: synthesizing %d frames, %d joints, %d body / %d cloth '
                '/ %d scene splats at %dpx' %
                (datetime.utcnow().isoformat(), frames, skeleton.joint_count,
                 len(body_gt), len(cloth_gt), len(scene_layer),
                 sc['resolution']))

    poses, cloth_verts, cameras, images, masks, boxes = [], [], [], [], [], []
    for k in range(frames):
        phase = 2.0*np.pi*WALK_CYCLES*k/max(frames, 1)
        pose = walk_pose(skeleton, phase)
        _, transforms = forward_kinematics(skeleton, pose)

        verts = lbs_apply(cloth_mesh.vertices, cloth_weights, transforms)
        verts = verts + swing_offsets(cloth_mesh.vertices, pose, skeleton)

        body_w = gt_world(body_gt, body_weights, transforms)
        cloth_w = gt_world(cloth_gt, cloth_weights, transforms,
                           centers=verts)
        camera = _orbit_camera(k, frames, cfg)

        base, _ = rd.render_base(body_w, scene_world, camera, background,
                                 settings=settings)
        cloth, _ = rd.render_cloth(cloth_w, camera, settings=settings)
        V, _, _ = rd.render_matte(
            cloth_w, scene_world, camera, settings=settings,
            body=body_w if settings.matte_include_body else None
        )

        poses.append(pose)
        cloth_verts.append(verts)
        cameras.append(camera)
        images.append(rd.composite_final(cloth.rgb, base.rgb, V))
        masks.append(V > 0.5)
        boxes.append(human_box(body_w, cloth_w, scene_world, camera,
                               settings))

    return SyntheticScene(skeleton, body_mesh, cloth_mesh, body_weights,
                          cloth_weights, poses, np.array(cloth_verts),
                          cameras, np.array(images), np.array(masks),
                          scene_layer, np.array(boxes), seed,
                          background=background)


#########
## I/O ##
#########

def write_scene_dir(scene, outdir):
    '''
    Materializes a scene under outdir (see the module docstring for the
    layout). Every file is a deterministic function of the scene.
    '''
    for sub in ('frames', 'masks', 'meshes', 'weights'):
        path = os.path.join(outdir, sub)
        if not os.path.exists(path):
            os.makedirs(path)
    for stale in (glob(os.path.join(outdir, 'frames', 'frame_*.png')) +
                  glob(os.path.join(outdir, 'masks', 'mask_*.png')) +
                  glob(os.path.join(outdir, 'meshes', 'cloth_[0-9]*.obj'))):
        os.remove(stale)

    for k in range(scene.frame_count):
        iu.write_rgb_png(os.path.join(outdir, 'frames', 'frame_%04d.png' % k),
                         scene.images[k])
        iu.write_gray16_png(os.path.join(outdir, 'masks', 'mask_%04d.png'
                                         % k),
                            scene.masks[k].astype(np.float64))
        write_obj(scene.cloth_mesh.with_vertices(scene.cloth_vertices[k]),
                  os.path.join(outdir, 'meshes', 'cloth_%04d.obj' % k))

    write_obj(scene.body_mesh, os.path.join(outdir, 'meshes',
                                            'body_rest.obj'))
    write_obj(scene.cloth_mesh, os.path.join(outdir, 'meshes',
                                             'cloth_rest.obj'))
    rd.write_cameras_json(os.path.join(outdir, 'cameras.json'),
                          scene.cameras)
    write_skeleton_json(os.path.join(outdir, 'skeleton.json'),
                        scene.skeleton, poses=scene.poses)
    np.save(os.path.join(outdir, 'weights', 'body_weights.npy'),
            scene.body_weights.matrix)
    np.save(os.path.join(outdir, 'weights', 'cloth_weights.npy'),
            scene.cloth_weights.matrix)
    write_layer(os.path.join(outdir, 'scene_splats.lgs'), scene.scene_layer)

    with open(os.path.join(outdir, 'scene.json'), 'w') as outfd:
        json.dump({'seed': scene.seed, 'frames': scene.frame_count,
                   'background': scene.background.tolist(),
                   'human_boxes': scene.human_boxes.tolist(),
                   'splits': split_frames(scene.frame_count)},
                  outfd, indent=1, sort_keys=True)

    LOGGER.info('%sZ: wrote %d-frame scene to %s' %
                (datetime.utcnow().isoformat(), scene.frame_count, outdir))
    return outdir


def load_scene(scenedir):
    '''
    Reads a directory written by write_scene_dir. Images come back at their
    8-bit precision and meshes at OBJ precision.
    '''
    meta_path = os.path.join(scenedir, 'scene.json')
    if not os.path.exists(meta_path):
        raise ValueError('no scene.json in %s' % scenedir)
    with open(meta_path) as infd:
        meta = json.load(infd)

    frames = int(meta['frames'])
    skeleton, _, poses = read_skeleton_json(os.path.join(scenedir,
                                                         'skeleton.json'))
    body_mesh = read_obj(os.path.join(scenedir, 'meshes', 'body_rest.obj'))
    cloth_mesh = read_obj(os.path.join(scenedir, 'meshes', 'cloth_rest.obj'))
    cameras = rd.read_cameras_json(os.path.join(scenedir, 'cameras.json'))

    images, masks, cloth_verts = [], [], []
    for k in range(frames):
        frame_path = os.path.join(scenedir, 'frames', 'frame_%04d.png' % k)
        if not os.path.exists(frame_path):
            raise ValueError('missing frame %s' % frame_path)
        images.append(iu.read_rgb_png(frame_path))
        masks.append(iu.read_mask_png(os.path.join(scenedir, 'masks',
                                                   'mask_%04d.png' % k)))
        cloth_verts.append(read_obj(os.path.join(
            scenedir, 'meshes', 'cloth_%04d.obj' % k)).vertices)

    body_weights = SkinWeights(np.load(os.path.join(scenedir, 'weights',
                                                    'body_weights.npy')))
    cloth_weights = SkinWeights(np.load(os.path.join(scenedir, 'weights',
                                                     'cloth_weights.npy')))
    scene_layer = read_layer(os.path.join(scenedir, 'scene_splats.lgs'))

    return SyntheticScene(skeleton, body_mesh, cloth_mesh, body_weights,
                          cloth_weights, poses, np.array(cloth_verts),
                          cameras, np.array(images), np.array(masks),
                          scene_layer, meta['human_boxes'], meta['seed'],
                          background=meta['background'])

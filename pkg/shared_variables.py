"""
This file contains constants and default settings that are shared across the
layered splatting engine.
"""

############################################
# spherical harmonics (real, degree 3)     #
# ordering follows the splatting renderers #
############################################

SH_DEGREE = 3
SH_NCOEFFS = (SH_DEGREE + 1)**2
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = [1.0925484305920792,
         -1.0925484305920792,
         0.31539156525252005,
         -1.0925484305920792,
         0.5462742152960396]
SH_C3 = [-0.5900435899266435,
         2.890611442640554,
         -0.4570457994644658,
         0.3731763325901154,
         -0.4570457994644658,
         1.445305721320277,
         -0.5900435899266435]

# added to the SH sum before clamping to [0,1]
SH_DC_OFFSET = 0.5

#########################
# splat initialization  #
#########################

INIT_OPACITY = 0.1
NORMAL_SCALE_RATIO = 0.1
INIT_GRAY = (0.5, 0.5, 0.5)
MAX_SCALE_METERS = 10.0
QUAT_NORM_TOL = 1e-6

##############################
# rasterization conventions  #
##############################

ALPHA_MAX = 0.99
ALPHA_SKIP = 1.0/255.0
TRANSMITTANCE_MIN = 1e-4
COV2D_DILATION = 0.3
TILE_SIZE = 16
DEPTH_EPS = 1e-10

##################
# file formats   #
##################

LAYER_MAGIC = b'LGS1'
CHECKPOINT_VERSION = 1
CHECKPOINT_SECTIONS = ['layers', 'triplanes', 'decoders', 'optimizer',
                       'config', 'rng-state']

PSNR_CAP_DB = 99.0
PSNR_MSE_FLOOR = 1e-10

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

###############################################################
# default configuration. every key here is documented in      #
# docs/config.md; JSON config files may only override these.  #
###############################################################

DEFAULT_CONFIG = {
    'scene': {
        'seed': 0,
        'joints': 12,
        'frames': 40,
        'resolution': 128,
        'n_body': 800,
        'n_cloth': 400,
        'n_scene': 300,
        'focal_factor': 1.2,
        'camera_radius': 3.2,
        'camera_height': 1.0,
    },
    'triplane': {
        'res': 64,
        'channels': 16,
        'init_scale': 1e-2,
        'bbox_pad': 0.1,
    },
    'decoders': {
        'hidden': [128, 128],
    },
    'losses': {
        'lambda_l1': 0.8,
        'lambda_ssim': 0.2,
        'lambda_lpips': 1.0,
        'lambda_sim': 1.0,
        'lambda_arap': 0.5,
        'lambda_mask': 1.0,
        'lambda_cloth_lbs': 1000.0,
        'gm_scale': 0.05,
        'ssim_window': 11,
        'ssim_c1': 0.01**2,
        'ssim_c2': 0.03**2,
    },
    'optim': {
        'lr_position_init': 1.6e-4,
        'lr_position_final': 1.6e-6,
        'lr_rotation': 1e-3,
        'lr_scale': 5e-3,
        'lr_opacity': 5e-2,
        'lr_sh': 2.5e-3,
        'lr_triplane': 1e-3,
        'lr_decoder': 1e-3,
        'beta1': 0.9,
        'beta2': 0.999,
        'eps': 1e-15,
    },
    'train': {
        'iterations': 2000,
        'horizon': 2000,
        'checkpoint_every': 500,
        'log_every': 50,
        'seed': 0,
        'ablation': 'full',
    },
    'render': {
        'tile_size': TILE_SIZE,
        'background': [0.0, 0.0, 0.0],
        'matte_include_body': False,
        'threads': 0,
    },
    'eval': {
        'splits': ['val', 'test'],
        'human_crop': True,
    },
}

# ablation presets: which physics terms survive
ABLATIONS = {
    'full': None,
    'no_physics': ('lambda_sim', 'lambda_arap', 'lambda_mask'),
    'no_cloth_lbs': ('lambda_cloth_lbs',),
    'arap_only': ('lambda_sim', 'lambda_mask'),
    'sim_only': ('lambda_arap', 'lambda_mask'),
    'mask_only': ('lambda_sim', 'lambda_arap'),
}


"""Tissue label IDs, names and 10 kHz conductivities used by the head models."""

BACKGROUND = 0

SKIN = 1
MUSCLE = 2
FAT = 3
BONE_CORTICAL = 4
BONE_CANCELLOUS = 5
DURA = 6
BLOOD = 7
CSF = 8
GM = 9
WM = 10
CEREBELLUM = 11
VITREOUS_HUMOR = 12
MUCOUS = 13

NUM_TISSUES = 13

TISSUE_NAMES = {
    SKIN: "skin",
    MUSCLE: "muscle",
    FAT: "fat",
    BONE_CORTICAL: "bone (cort.)",
    BONE_CANCELLOUS: "bone (canc.)",
    DURA: "dura",
    BLOOD: "blood",
    CSF: "csf",
    GM: "gm",
    WM: "wm",
    CEREBELLUM: "cerebellum",
    VITREOUS_HUMOR: "v. humor",
    MUCOUS: "mucous tissue",
}

# S/m
CONDUCTIVITY = {
    SKIN: 0.10,
    MUSCLE: 0.34,
    FAT: 0.04,
    BONE_CORTICAL: 0.02,
    BONE_CANCELLOUS: 0.08,
    DURA: 0.5,
    BLOOD: 0.70,
    CSF: 2.00,
    GM: 0.10,
    WM: 0.07,
    CEREBELLUM: 0.13,
    VITREOUS_HUMOR: 1.50,
    MUCOUS: 0.07,
}

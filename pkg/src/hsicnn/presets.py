"""Dataset presets with reference parameter counts, accuracies and split totals.

``classes`` are the original ground-truth ids kept for evaluation; ``sizes``
the labelled-pixel count of each, in the same order.
"""
from dataclasses import dataclass


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    shape: tuple  # H, W, B
    classes: tuple
    class_names: tuple
    sizes: tuple
    width: int
    reported_params: float  # thousands
    reported_oa: tuple  # mean, std, best (percent, 20 partitions)

    @property
    def n_classes(self):
        return len(self.classes)


INDIAN_PINES = DatasetPreset(
    name="indian_pines",
    shape=(145, 145, 220),
    classes=(2, 3, 5, 8, 10, 11, 12, 14),
    class_names=(
        "Corn-notill", "Corn-mintill", "Grass-pasture", "Hay-windrowed",
        "Soybean-notill", "Soybean-mintill", "Soybean-clean", "Woods",
    ),
    sizes=(1428, 830, 483, 478, 972, 2455, 593, 1265),
    width=128,
    reported_params=1122.5,
    reported_oa=(93.61, 0.56, 94.24),
)

SALINAS = DatasetPreset(
    name="salinas",
    shape=(512, 217, 224),
    classes=tuple(range(1, 17)),
    class_names=(
        "Broccoli green weeds 1", "Broccoli green weeds 2", "Fallow", "Fallow rough plow",
        "Fallow smooth", "Stubble", "Celery", "Grapes untrained", "Soil vineyard develop",
        "Corn senesced green weeds", "Lettuce romaines 4wk", "Lettuce romaines 5wk",
        "Lettuce romaines 6wk", "Lettuce romaines 7wk", "Vineyard untrained", "Vineyard vertical trellis",
    ),
    sizes=(2009, 3726, 1976, 1394, 2678, 3959, 3579, 11271, 6203, 3278, 1068, 1927, 916, 1070, 7268, 1807),
    width=192,
    reported_params=1875.8,
    reported_oa=(95.07, 0.23, 95.42),
)

PAVIA_UNIVERSITY = DatasetPreset(
    name="pavia_university",
    shape=(610, 340, 103),
    classes=tuple(range(1, 10)),
    class_names=("Asphalt", "Meadows", "Gravel", "Trees", "Sheets", "Bare soils", "Bitumen", "Bricks", "Shadows"),
    sizes=(6631, 18649, 2099, 3064, 1345, 5029, 1330, 3682, 947),
    width=128,
    reported_params=610.6,
    reported_oa=(95.97, 0.46, 96.73),
)

PRESETS = {p.name: p for p in (INDIAN_PINES, SALINAS, PAVIA_UNIVERSITY)}

# reference pool sizes in thousands of augmented patches (12.4 for Salinas, though 4 x 3200 = 12.8)
REPORTED_POOL_K = {"indian_pines": 6.4, "salinas": 12.4, "pavia_university": 7.2}
REPORTED_TOTALS = {"indian_pines": (1600, 6904), "salinas": (3200, 50929), "pavia_university": (1800, 40976)}

"""Report vocabulary and per-label keyword sets."""

KEYWORDS = {
    "normal": (
        "clear", "unremarkable", "normal", "expanded", "sharp",
        "intact", "healthy", "patent", "symmetric", "lucent",
    ),
    "pneumonia": (
        "consolidation", "opacity", "infiltrate", "airspace", "pneumonia",
        "patchy", "lobar", "dense", "focal", "infection",
    ),
    "edema": (
        "edema", "interstitial", "vascular", "congestion", "kerley",
        "cephalization", "fluid", "hazy", "bilateral", "perihilar",
    ),
    "fracture": ("fracture", "rib", "cortical", "displaced", "callus", "break"),
    "cardiomegaly": ("cardiomegaly", "enlarged", "cardiac", "silhouette", "heart", "widened"),
}

FILLER = (
    "chest", "view", "frontal", "lateral", "study", "patient", "seen", "there",
    "is", "the", "of", "and", "with", "film", "exam", "portable", "upright",
    "compared", "prior", "within", "limits", "mild",
)

VOCAB = tuple(w for words in KEYWORDS.values() for w in words) + FILLER

LABELS = tuple(KEYWORDS)
DISTRACTOR_LABELS = ("fracture", "cardiomegaly")

assert len(VOCAB) == 64 and len(set(VOCAB)) == 64

"""Closed label vocabularies, canonical class orders and pseudo-text templates."""

import enum

from refdx.errors import DomainError


class Abnormality(enum.Enum):
    NORMAL = "Normal"
    MTL_ATROPHY = "MTLAtrophy"
    WMH = "WMH"
    OTHER_ATROPHY = "OtherAtrophy"


class Dementia(enum.Enum):
    NON_DEMENTIA = "NonDementia"
    AD = "AD"
    OTHER_DEMENTIA = "OtherDementia"


class Binary(enum.Enum):
    NON_DEMENTED = "NonDemented"
    DEMENTED = "Demented"


class Severity(enum.Enum):
    NON_DEMENTED = "NonDemented"
    VERY_MILD = "VeryMild"
    MILD = "Mild"
    MODERATE = "Moderate"


class Task(enum.Enum):
    ABNORMALITY = "abnormality"
    BINARY = "binary"
    DEMENTIA_TYPE = "type"
    SEVERITY = "severity"


# canonical class order per task; index 0 wins argmax ties
TASK_CLASSES = {
    Task.ABNORMALITY: tuple(Abnormality),
    Task.BINARY: tuple(Binary),
    Task.DEMENTIA_TYPE: tuple(Dementia),
    Task.SEVERITY: tuple(Severity),
}

TASK_ARITY = {task: len(classes) for task, classes in TASK_CLASSES.items()}

# (long name, short name) as used in rendered reports
DISPLAY = {
    Abnormality.NORMAL: ("Normal", "Normal"),
    Abnormality.MTL_ATROPHY: ("MTL Atrophy", "MTL Atrophy"),
    Abnormality.WMH: ("WMH", "WMH"),
    Abnormality.OTHER_ATROPHY: ("Other Atrophy", "Other"),
    Dementia.NON_DEMENTIA: ("Non-Dementia", "Non-Dementia"),
    Dementia.AD: ("Alzheimer's Disease", "AD"),
    Dementia.OTHER_DEMENTIA: ("Other Dementia", "Other Dementia"),
    Binary.NON_DEMENTED: ("Non-Demented", "Non-Demented"),
    Binary.DEMENTED: ("Demented", "Demented"),
    Severity.NON_DEMENTED: ("Non-Demented", "Non-Demented"),
    Severity.VERY_MILD: ("Very Mild Demented", "Very Mild"),
    Severity.MILD: ("Mild Demented", "Mild"),
    Severity.MODERATE: ("Moderate Demented", "Moderate"),
}

ABNORMALITY_TEMPLATES = {
    Abnormality.NORMAL: "MRI image shows normal brain without evidence of significant structures or pathological changes.",
    Abnormality.MTL_ATROPHY: "MRI image illustrates volume reduction and structural atrophy in the medial temporal lobes, including hippocampal shrinkage.",
    Abnormality.WMH: "MRI image reveals hyperintense lesions within cerebral white matter regions, indicating white matter hyperintensities.",
    Abnormality.OTHER_ATROPHY: "MRI image indicates brain atrophy in cortical or subcortical regions other than medial temporal lobes, with notable structural volume loss.",
}

DEMENTIA_TEMPLATES = {
    Dementia.NON_DEMENTIA: "MRI image presents no evident dementia-related structural changes, reflecting a normal cognitive state.",
    Dementia.AD: "MRI image shows characteristic patterns of brain atrophy suggestive of Alzheimer's Disease pathology.",
    Dementia.OTHER_DEMENTIA: "MRI image shows structural brain abnormalities indicative of dementia types other than Alzheimer's Disease, such as Vascular dementia or Dementia with Lewy bodies.",
}

SEVERITY_TEMPLATES = {
    Severity.NON_DEMENTED: "MRI image depicts normal brain anatomy without visible dementia-related atrophic or pathological changes.",
    Severity.VERY_MILD: "MRI image presents subtle and minimal structural changes, consistent with very mild cognitive impairment or early-stage dementia.",
    Severity.MILD: "MRI image illustrates noticeable atrophic changes in brain regions, indicative of mild dementia progression.",
    Severity.MODERATE: "MRI image shows pronounced structural atrophy and pathological changes characteristic of moderate dementia severity.",
}

TASK_TEMPLATES = {
    Task.ABNORMALITY: ABNORMALITY_TEMPLATES,
    Task.DEMENTIA_TYPE: DEMENTIA_TEMPLATES,
    Task.SEVERITY: SEVERITY_TEMPLATES,
}


def parse_task(value):
    if isinstance(value, Task):
        return value
    try:
        return Task(value)
    except ValueError:
        raise DomainError(f"unknown task {value!r}") from None


def parse_label(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        raise DomainError(f"unknown {enum_cls.__name__} label {value!r}") from None


def class_index(task, label):
    return TASK_CLASSES[task].index(label)


def combined_text(abnormality, dementia):
    """Abnormality sentence and dementia sentence joined by one space."""
    return f"{ABNORMALITY_TEMPLATES[abnormality]} {DEMENTIA_TEMPLATES[dementia]}"


def pseudo_text(abnormality, dementia, description=""):
    """The four pseudo-text strings of one case.

    Returns ``(description, abnormality sentence, dementia sentence, combined)``;
    the description is the case's own free-text report, passed through.
    """
    abnormality = parse_label(Abnormality, abnormality)
    dementia = parse_label(Dementia, dementia)
    return (
        description,
        ABNORMALITY_TEMPLATES[abnormality],
        DEMENTIA_TEMPLATES[dementia],
        combined_text(abnormality, dementia),
    )

"""Persona synthesis: occupation sampling, demographic sampling, and a
backend-written introduction.

Bundled simplified surname and industry tables stand in for the full census
downloads; the config accepts replacement files with the same headers.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

from .config import PipelineConfig
from .llm import Backend, CompletionRequest
from .rng import derive_rng

__all__ = [
    "Persona",
    "OccupationTable",
    "SurnameTable",
    "PersonaError",
    "sample_occupation",
    "sample_demographics",
    "write_introduction",
    "generate_pool",
    "write_pool",
    "read_pool",
]

WORK_STATUSES = ("employed", "unemployed/retired", "student")
GENDERS = ("male", "female")
MBTI_TYPES = (
    "ISTJ", "ISFJ", "INFJ", "INTJ", "ISTP", "ISFP", "INFP", "INTP",
    "ESTP", "ESFP", "ENFP", "ENTP", "ESTJ", "ESFJ", "ENFJ", "ENTJ",
)
RACES = (
    "White",
    "Hispanic or Latino",
    "Black or African American",
    "Asian or Pacific Islander",
    "American Indian or Alaska Native",
    "not specified",
)
_RACE_COLUMNS = (
    "white", "hispanic", "black", "asian_pacific", "american_indian",
    "not_specified",
)
JOB_LEVELS = ("senior", "intermediate", "entry-level", "not-specified")


class PersonaError(ValueError):
    pass


@dataclass
class Persona:
    id: str
    surname: str
    first_name: str = ""
    gender: str = ""
    race: str = ""
    work_status: str = ""
    occupation_code: str = ""
    occupation_title: str = ""
    location: str = ""
    affiliation: str = ""
    job_level: str = "not-specified"
    mbti: str = ""
    introduction: str = ""
    speaking_habit: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Persona":
        return cls(**d)


@dataclass(frozen=True)
class OccupationTable:
    rows: tuple[tuple[str, str], ...]  # (code, title)

    @classmethod
    def load(cls, path) -> "OccupationTable":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            rows = tuple((r["code"], r["title"]) for r in reader)
        if not rows:
            raise PersonaError(f"empty occupation table: {path}")
        return cls(rows)


@dataclass(frozen=True)
class SurnameTable:
    surnames: tuple[str, ...]
    counts: tuple[float, ...]
    race_weights: tuple[tuple[float, ...], ...]  # aligned with RACES

    @classmethod
    def load(cls, path) -> "SurnameTable":
        surnames, counts, weights = [], [], []
        with open(path, newline="", encoding="utf-8") as f:
            for i, row in enumerate(csv.DictReader(f)):
                try:
                    surnames.append(row["surname"])
                    counts.append(float(row["count"]))
                    weights.append(tuple(float(row[c]) for c in _RACE_COLUMNS))
                except (KeyError, ValueError) as e:
                    raise PersonaError(f"malformed surname table row {i}: {e}")
        if not surnames:
            raise PersonaError(f"empty surname table: {path}")
        return cls(tuple(surnames), tuple(counts), tuple(weights))


def persona_rng(seed: int, index: int) -> random.Random:
    """Independent stream per persona, stable under parallel schedules."""
    return derive_rng(seed, "persona", index)


def sample_occupation(
    rng: random.Random,
    table: OccupationTable,
    llm: Backend,
    weights: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> dict:
    """Step 1: work status, industry occupation, and backend-filled details."""
    if not table.rows:
        raise PersonaError("empty occupation table")
    status = rng.choices(WORK_STATUSES, weights=weights)[0]
    out = {
        "work_status": status,
        "occupation_code": "",
        "occupation_title": "",
        "location": "",
        "affiliation": "",
        "job_level": "not-specified",
    }
    if status == "unemployed/retired":
        return out
    code, title = table.rows[rng.randrange(len(table.rows))]
    out["occupation_code"] = code
    out["occupation_title"] = title
    prompt = (
        f"A person is {status} in the industry {title!r}. Invent a plausible "
        "work location, affiliation, and job level (senior, intermediate, "
        "entry-level, or not-specified). Return JSON with keys location, "
        "affiliation, job_level."
    )
    completion = llm.complete(
        CompletionRequest(
            messages=(("user", prompt),),
            tag="persona_details",
            metadata={"work_status": status, "occupation_title": title,
                      "stream": rng.random()},
        )
    )
    details = _parse_json_object(completion)
    out["location"] = str(details.get("location", ""))
    out["affiliation"] = str(details.get("affiliation", ""))
    level = str(details.get("job_level", "not-specified"))
    out["job_level"] = level if level in JOB_LEVELS else "not-specified"
    return out


def sample_demographics(rng: random.Random, table: SurnameTable) -> dict:
    """Step 2: (surname, race) drawn jointly, plus gender and MBTI."""
    idx = rng.choices(range(len(table.surnames)), weights=table.counts)[0]
    surname = table.surnames[idx]
    race = rng.choices(RACES, weights=table.race_weights[idx])[0]
    return {
        "surname": surname,
        "race": race,
        "gender": rng.choice(GENDERS),
        "mbti": rng.choice(MBTI_TYPES),
    }


_STATUS_CUES = {
    "employed": ("works", "working", "work"),
    "student": ("student", "studies", "studying"),
    "unemployed/retired": ("retired", "unemployed", "between jobs"),
}


def speaking_habit_for(mbti: str, job_level: str) -> str:
    """Fixed MBTI/job-level mapping to a speaking-style instruction."""
    energy = (
        "You speak in an outgoing, chatty way"
        if mbti.startswith("E")
        else "You speak in a brief, reserved way"
    )
    if mbti[1:2] == "N":
        framing = "and sometimes describe things in roundabout terms"
    else:
        framing = "and state concrete facts plainly"
    if job_level == "senior":
        register = ". You use a polished, professional register."
    elif job_level == "entry-level":
        register = ". You use casual, informal wording."
    else:
        register = "."
    return f"{energy} {framing}{register}"


def write_introduction(
    partial: dict, llm: Backend, retries: int = 3
) -> dict:
    """Step 3: backend-written introduction with fictionalized details."""
    surname = partial.get("surname", "")
    if not surname:
        raise PersonaError("persona has no surname; run demographics first")
    if not partial.get("work_status"):
        raise PersonaError("persona has no work status; run occupation first")
    cues = _STATUS_CUES[partial["work_status"]]
    last_error = "no attempt made"
    for attempt in range(retries):
        prompt = (
            "Write a short first-person-free introduction for this persona, "
            "inventing a first name, age, and hobbies. Mention the surname "
            f"and work situation. Persona: {json.dumps(partial, sort_keys=True)}"
        )
        completion = llm.complete(
            CompletionRequest(
                messages=(("user", prompt),),
                tag="persona_intro",
                metadata={
                    "surname": surname,
                    "work_status": partial["work_status"],
                    "occupation_title": partial.get("occupation_title", ""),
                    "mbti": partial.get("mbti", ""),
                    "attempt": attempt,
                },
            )
        )
        try:
            obj = _parse_json_object(completion)
        except PersonaError as e:
            last_error = str(e)
            continue
        intro = str(obj.get("introduction", ""))
        lowered = intro.lower()
        if surname.lower() not in lowered:
            last_error = "introduction does not mention the surname"
            continue
        if not any(cue in lowered for cue in cues):
            last_error = "introduction does not mention the work status"
            continue
        out = dict(partial)
        out["first_name"] = str(obj.get("first_name", ""))
        out["introduction"] = intro
        out["speaking_habit"] = speaking_habit_for(
            partial.get("mbti", "ISTJ"), partial.get("job_level", "not-specified")
        )
        return out
    raise PersonaError(f"introduction rejected after {retries} attempts: {last_error}")


def _parse_json_object(text: str) -> dict:
    """Extract the first balanced JSON object from possibly noisy text."""
    start = text.find("{")
    if start < 0:
        raise PersonaError(f"no JSON object in completion: {text[:80]!r}")
    depth = 0
    in_string = False
    escape = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                try:
                    return json.loads(text[start:i + 1])
                except json.JSONDecodeError as e:
                    raise PersonaError(f"invalid JSON object: {e}")
    raise PersonaError("unbalanced JSON object in completion")


def generate_pool(config: PipelineConfig, llm: Backend) -> list[Persona]:
    """Generate the persona pool; resamples a persona if validation keeps
    failing for a particular draw."""
    occupations = OccupationTable.load(config.industry_table_path)
    surnames = SurnameTable.load(config.surname_table_path)
    pool = []
    for index in range(config.persona_pool_size):
        rng = persona_rng(config.seed, index)
        for _ in range(5):  # resampling bound
            partial = {"id": f"persona-{index:04d}"}
            partial.update(
                sample_occupation(rng, occupations, llm,
                                  config.work_status_weights)
            )
            partial.update(sample_demographics(rng, surnames))
            try:
                partial = write_introduction(partial, llm,
                                             retries=config.content_retries)
            except PersonaError:
                continue
            pool.append(Persona.from_dict(partial))
            break
        else:
            raise PersonaError(f"could not generate persona {index}")
    return pool


def write_pool(pool: list[Persona], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pool:
            f.write(json.dumps(p.to_dict(), ensure_ascii=False, sort_keys=True))
            f.write("\n")


def read_pool(path) -> list[Persona]:
    pool = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                pool.append(Persona.from_dict(json.loads(line)))
    return pool

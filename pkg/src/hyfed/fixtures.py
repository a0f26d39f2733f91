"""The bundled 30-record fixture and its frozen derived values.

Everything here is generated by index arithmetic, without a random number
generator, so regeneration is identical on every platform and Python version.
``hyfed fixtures --verify`` regenerates the files and compares them byte for
byte with the checked-in copies under ``hyfed/data/fixture``.

The corpus carries all three modalities per record: a narrative body for the
text client, structured fields for the SQL client and triples for the KG
client (six records have no triples; their entities come from NER). Ten
synthetic people supply the 50 seeded PII tokens listed in ``pii_tokens.txt``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .corpus import PatientRecord

FIXTURE_PACKAGE = "hyfed.data"
FIXTURE_DIR = "fixture"
FILES = ("corpus.jsonl", "queries.jsonl", "qrels.tsv", "pii_tokens.txt", "expected.json")

# (first, last, mrn, phone, email)
PEOPLE = [
    ("Eleanor", "Whitfield", "48392107", "555-201-7788", "ewhitfield@mailhost.test"),
    ("Tobias", "Okonkwo", "59120344", "555-318-2046", "tokonkwo@mailhost.test"),
    ("Marguerite", "Castellano", "61027593", "555-472-9130", "mcastellano@mailhost.test"),
    ("Desmond", "Haverford", "70283916", "555-604-3371", "dhaverford@mailhost.test"),
    ("Priyanka", "Raghunathan", "83710452", "555-739-5582", "praghunathan@mailhost.test"),
    ("Wilhelmina", "Boateng", "92648017", "555-845-1209", "wboateng@mailhost.test"),
    ("Cornelius", "Lindqvist", "30571986", "555-926-4417", "clindqvist@mailhost.test"),
    ("Anastasia", "Moreau", "41869320", "555-137-6654", "amoreau@mailhost.test"),
    ("Bartholomew", "Nakamura", "52094718", "555-283-9920", "bnakamura@mailhost.test"),
    ("Genevieve", "Szymanski", "63358201", "555-460-7035", "gszymanski@mailhost.test"),
]


@dataclass(frozen=True)
class Condition:
    name: str
    symptoms: tuple[str, str, str, str]
    drugs: tuple[str, str]
    organ: str


# Signatures overlap on purpose: no single symptom or drug identifies a condition.
CONDITIONS = [
    Condition("asthma", ("wheezing", "dyspnea", "cough", "fatigue"), ("albuterol", "prednisone"), "airway"),
    Condition("type 2 diabetes", ("polyuria", "fatigue", "weight loss", "blurred vision"),
              ("metformin", "insulin"), "pancreas"),
    Condition("hypertension", ("headache", "dizziness", "blurred vision", "chest pain"),
              ("lisinopril", "amlodipine"), "vascular"),
    Condition("rheumatoid arthritis", ("joint pain", "morning stiffness", "fatigue", "fever"),
              ("methotrexate", "prednisone"), "joint"),
    Condition("pneumonia", ("fever", "cough", "dyspnea", "chest pain"), ("amoxicillin", "azithromycin"), "lung"),
    Condition("migraine", ("headache", "nausea", "photophobia", "dizziness"), ("sumatriptan", "topiramate"),
              "neurologic"),
    Condition("hypothyroidism", ("fatigue", "weight gain", "cold intolerance", "edema"),
              ("levothyroxine", "liothyronine"), "thyroid"),
    Condition("atrial fibrillation", ("palpitations", "dyspnea", "dizziness", "fatigue"),
              ("apixaban", "metoprolol"), "cardiac"),
    Condition("crohn disease", ("abdominal pain", "diarrhea", "weight loss", "fever"),
              ("infliximab", "prednisone"), "bowel"),
    Condition("systemic lupus erythematosus", ("rash", "joint pain", "fever", "fatigue"),
              ("hydroxychloroquine", "prednisone"), "immune"),
]

RELATIONS = ("HAS_DISEASE", "HAS_SYMPTOM", "TREATED_WITH")
SETTINGS = ("outpatient clinic", "emergency department", "inpatient ward")
DATES = ("2019-04-12", "March 3, 2020", "11/22/2018", "2021-07-30", "14 June 2017")


def _uid(i: int) -> str:
    return f"pt-{i + 1:03d}"


def _record_symptoms(i: int) -> list[str]:
    """Three of the condition's four symptoms plus one incidental symptom of another condition."""
    c = CONDITIONS[i // 3]
    v = i % 3
    own = [s for j, s in enumerate(c.symptoms) if j != 3 - v]
    other = CONDITIONS[(i // 3 + 1 + 2 * v) % 10].symptoms[(i + 1) % 4]
    if other not in own:
        own.append(other)
    return own


def build_records() -> list[PatientRecord]:
    """Three records per condition; record i uses condition i // 3."""
    out = []
    for i in range(30):
        c = CONDITIONS[i // 3]
        v = i % 3
        first, last, mrn, phone, email = PEOPLE[(i * 3) % 10]
        syms = _record_symptoms(i)
        drug = c.drugs[v % 2]
        age = (34, 58, 93)[v] + (i // 3)
        sex = ("woman", "man")[i % 2]
        setting = SETTINGS[(i + v) % 3]
        relative = CONDITIONS[(i // 3 + 3 + v) % 10]
        title = f"{c.name.capitalize()} in a {age}-year-old {sex}"
        sentences = [
            f"{first} {last} (MRN {mrn}) presented to the {setting} with {syms[0]} and {syms[1]}.",
            f"On review there was also {syms[2]}" + (f" and {syms[3]}." if len(syms) > 3 else "."),
            f"The working diagnosis was {c.name} with {c.organ} involvement, first recorded on {DATES[i % 5]}.",
            f"Therapy with {drug} was started and the {syms[0]} improved over two weeks.",
        ]
        if v == 1:
            sentences.append(f"A relative has {relative.name}, and a screening for {relative.symptoms[0]} was negative.")
        if v == 2:
            sentences.append(f"Follow-up by phone at {phone} or by email at {email} was arranged.")
        fields = {
            "diagnosis": c.name,
            "symptom": syms[0],
            "medication": drug,
            "sex": sex,
            "age_group": ("adult", "middle age", "elderly")[v],
            "care_setting": setting,
        }
        if v == 2:
            fields["contact_phone"] = phone
        uid = _uid(i)
        triples: tuple = ()
        # six records (0, 5, 11, 17, 23, 29) rely on NER instead of triples
        if i % 6 != 5 and i != 0:
            triples = (
                (uid, "HAS_DISEASE", c.name),
                *((uid, "HAS_SYMPTOM", s) for s in syms),
                (uid, "TREATED_WITH", drug),
            )
        out.append(PatientRecord(uid, title, " ".join(sentences), fields, triples))
    return out


def build_queries() -> list[dict]:
    """Three queries per condition; none names the disease.

    Two are terse symptom lists; the third is a verbose narrative whose
    boilerplate overlaps every record. Relevance is condition-level: the
    source record is graded 2, the other two records of the condition 1.
    """
    out = []
    for ci, c in enumerate(CONDITIONS):
        s = c.symptoms
        out.append({
            "query_id": f"q{ci * 3 + 1:02d}",
            "title": f"{s[0]} with {s[1]}",
            "abstract": f"Adult seen in the {SETTINGS[ci % 3]} with {s[0]}, {s[1]} and {s[2]}.",
            "source": _uid(ci * 3),
        })
        out.append({
            "query_id": f"q{ci * 3 + 2:02d}",
            "title": f"{s[3]} and {s[1]}",
            "abstract": f"Patient with {s[3]} and {s[1]} who improved on {c.drugs[1]}; {c.organ} involvement suspected.",
            "source": _uid(ci * 3 + 1),
        })
        out.append({
            "query_id": f"q{ci * 3 + 3:02d}",
            "title": f"{s[0]} and {s[3]}",
            "abstract": f"The patient presented to the clinic with {s[0]} and {s[3]}; therapy was started and the "
                        f"symptoms improved over two weeks with follow-up arranged.",
            "source": _uid(ci * 3 + 2),
        })
    return out


def build_qrels(queries: list[dict]) -> list[tuple[str, str, int]]:
    rows = []
    for q in queries:
        src = int(q["source"][3:]) - 1
        base = (src // 3) * 3
        for j in range(base, base + 3):
            rows.append((q["query_id"], _uid(j), 2 if j == src else 1))
    return rows


def pii_tokens() -> list[str]:
    return [tok for person in PEOPLE for tok in person]


# ---------------------------------------------------------------------------
# Files


def _jsonl(objs) -> str:
    return "".join(json.dumps(o, ensure_ascii=False, sort_keys=True) + "\n" for o in objs)


def derived_values(records: list[PatientRecord]) -> dict:
    """Values frozen after a reference run; recomputed by ``--verify``."""
    from .bench import WorkloadParams, generate_workload
    from .cache import TierConfig, simulate
    from .corpus import Corpus, build_association_graph

    corpus = Corpus.from_records(records, "text")
    assoc = build_association_graph(corpus)
    events = generate_workload(assoc, WorkloadParams())
    sim = simulate(events, TierConfig(), assoc.record_projection())
    return {
        "association_graph": {
            "nodes": len(assoc.adjacency),
            "record_nodes": len(assoc.record_nodes),
            "entity_nodes": len(assoc.adjacency) - len(assoc.record_nodes),
            "edges": assoc.n_edges,
        },
        "workload_seed42_first20": [e.node_id for e in events[:20]],
        "cache_seed42": sim.report(),
    }


def generate() -> dict[str, str]:
    records = build_records()
    queries = build_queries()
    qrels = build_qrels(queries)
    return {
        "corpus.jsonl": _jsonl(r.to_dict() for r in records),
        "queries.jsonl": _jsonl({k: q[k] for k in ("query_id", "title", "abstract")} for q in queries),
        "qrels.tsv": "".join(f"{q}\t{u}\t{g}\n" for q, u, g in qrels),
        "pii_tokens.txt": "".join(t + "\n" for t in pii_tokens()),
        "expected.json": json.dumps(derived_values(records), indent=2, sort_keys=True) + "\n",
    }


def fixture_dir() -> Path:
    return Path(str(resources.files(FIXTURE_PACKAGE).joinpath(FIXTURE_DIR)))


def fixture_path(name: str) -> Path:
    if name not in FILES:
        raise KeyError(name)
    return fixture_dir() / name


def write(out_dir=None) -> list[Path]:
    out = Path(out_dir) if out_dir else fixture_dir()
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in generate().items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths


def verify(fixture_root=None) -> list[str]:
    """Names of files that are missing or differ from a fresh regeneration."""
    root = Path(fixture_root) if fixture_root else fixture_dir()
    drift = []
    for name, text in generate().items():
        p = root / name
        if not p.exists() or p.read_text(encoding="utf-8") != text:
            drift.append(name)
    return drift


def load_pii_tokens(path=None) -> list[str]:
    p = Path(path) if path else fixture_path("pii_tokens.txt")
    return [t for t in p.read_text(encoding="utf-8").splitlines() if t]

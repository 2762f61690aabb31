//! Shared fixture: a two-database Spider-layout dataset with 20 questions,
//! a scripted mock backend over it, and a small labeled knowledge base.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde_json::json;

use ecpt::case::{Case, CorrectionCase, ErrorId, ExecutionOutcome, OutcomeKind, SchemaDescription};
use ecpt::embedding::{BaseEmbedder, HashEmbedder, ProjectionModel};
use ecpt::kb::KbStore;
use ecpt::llm::{MockResponse, MockRule, MockScript, Step};
use ecpt::spider::{Dataset, ExclusionList};
use ecpt::sqlrun::{RunnerConfig, SqlRunner};

pub struct Item {
    pub db: &'static str,
    pub question: &'static str,
    pub truth: &'static str,
    pub zero_shot: &'static str,
    /// Treatment replies in trial order; the last one repeats.
    pub treatment: &'static [&'static str],
}

const MUSIC: &str = "music";
const ALLERGY: &str = "allergy_1";

/// 12 zero-shot successes; 8 failures of which 5 are fixed (two on trial 1,
/// two on trial 2, one on trial 3). Scheduled trials: 1+1+2+3+2+3+3+3 = 18.
pub const ITEMS: [Item; 20] = [
    Item {
        db: MUSIC,
        question: "How many singers do we have?",
        truth: "SELECT count(*) FROM singer",
        zero_shot: "SELECT count(*) FROM singer",
        treatment: &[],
    },
    Item {
        db: MUSIC,
        question: "List the names of all singers.",
        truth: "SELECT name FROM singer",
        zero_shot: "```sql\nSELECT name FROM singer;\n```",
        treatment: &[],
    },
    Item {
        db: MUSIC,
        question: "What is the average age of singers from France?",
        truth: "SELECT avg(age) FROM singer WHERE country = 'France'",
        zero_shot: "SELECT avg(age) FROM singer WHERE country = 'France'",
        treatment: &[],
    },
    Item {
        db: MUSIC,
        question: "Show the names of singers ordered by age descending.",
        truth: "SELECT name FROM singer ORDER BY age DESC",
        zero_shot: "SELECT name FROM singer ORDER BY age DESC",
        treatment: &[],
    },
    Item {
        db: MUSIC,
        question: "How many concerts were held in 2014?",
        truth: "SELECT count(*) FROM concert WHERE year = 2014",
        zero_shot: "SELECT count(*) FROM concert",
        treatment: &["SELECT count(*) FROM concert WHERE year = 2014"],
    },
    Item {
        db: MUSIC,
        question: "List distinct countries of singers.",
        truth: "SELECT DISTINCT country FROM singer",
        zero_shot: "SELECT country FROM singer",
        treatment: &["Here is the fix:\nSELECT DISTINCT country FROM singer"],
    },
    Item {
        db: MUSIC,
        question: "Show the name of the oldest singer.",
        truth: "SELECT name FROM singer ORDER BY age DESC LIMIT 1",
        zero_shot: "SELECT name FROM singer ORDER BY age DESC LIMIT 1",
        treatment: &[],
    },
    Item {
        db: MUSIC,
        question: "What are the names of singers who performed in a concert in 2015?",
        truth: "SELECT DISTINCT T1.name FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id WHERE T2.year = 2015",
        zero_shot: "SELECT DISTINCT T2.nam FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id WHERE T2.year = 2015",
        treatment: &[
            "SELECT T1.name FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id WHERE T2.year = 2014",
            "SELECT DISTINCT T1.name FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id WHERE T2.year = 2015",
        ],
    },
    Item {
        db: MUSIC,
        question: "How many concerts has each singer performed?",
        truth: "SELECT singer_id, count(*) FROM concert GROUP BY singer_id",
        zero_shot: "SELECT singer_id, count(*) FROM concert GROUP BY singer_id",
        treatment: &[],
    },
    Item {
        db: MUSIC,
        question: "What is the maximum age of singers from the Netherlands?",
        truth: "SELECT max(age) FROM singer WHERE country = 'Netherlands'",
        zero_shot: "SELECT max(age) FROM singer WHERE country = 'Netherlands'",
        treatment: &[],
    },
    Item {
        db: MUSIC,
        question: "List the concert names in year order.",
        truth: "SELECT concert_name FROM concert ORDER BY year, concert_id",
        zero_shot: "SELECT concert_name FROM concert ORDER BY year DESC",
        treatment: &["SELECT concert_name FROM concert ORDER BY concert_name"],
    },
    Item {
        db: MUSIC,
        question: "Which singers are younger than 30?",
        truth: "SELECT name FROM singer WHERE age < 30",
        // Same rows in a different order; the truth has no ORDER BY.
        zero_shot: "SELECT name FROM singer WHERE age < 30 ORDER BY name DESC",
        treatment: &[],
    },
    Item {
        db: ALLERGY,
        question: "What are all the different food allergies?",
        truth: "SELECT DISTINCT allergy FROM allergy_type WHERE allergytype = 'food'",
        zero_shot: "SELECT DISTINCT allergy FROM allergy_type WHERE allergytype = \"Food\"",
        treatment: &[
            "SELECT DISTINCT allergy FROM allergy_type WHERE allergytype = 'FOOD'",
            "SELECT allergy FROM allergy_type",
            "SELECT DISTINCT allergy FROM allergy_type WHERE allergytype = 'food'",
        ],
    },
    Item {
        db: ALLERGY,
        question: "How many allergy types are there?",
        truth: "SELECT count(DISTINCT allergytype) FROM allergy_type",
        zero_shot: "SELECT count(DISTINCT allergytype) FROM allergy_type",
        treatment: &[],
    },
    Item {
        db: ALLERGY,
        question: "Which students have a milk allergy?",
        truth: "SELECT stuid FROM has_allergy WHERE allergy = 'Milk'",
        zero_shot: "SELECT stuid FROM has_allergy WHERE allergy = 'Milk'",
        treatment: &[],
    },
    Item {
        db: ALLERGY,
        question: "How many students have allergies?",
        truth: "SELECT count(DISTINCT stuid) FROM has_allergy",
        zero_shot: "SELECT count(stuid) FROM has_allergy",
        treatment: &[
            "I am not sure how to fix this.",
            "SELECT count(DISTINCT stuid) FROM has_allergy",
        ],
    },
    Item {
        db: ALLERGY,
        question: "List animal allergies.",
        truth: "SELECT allergy FROM allergy_type WHERE allergytype = 'animal'",
        zero_shot: "SELECT allergy FROM allergy_type WHERE allergytype = 'animal'",
        treatment: &[],
    },
    Item {
        db: ALLERGY,
        question: "What allergy type does each student's allergy have?",
        truth: "SELECT T1.stuid, T2.allergytype FROM has_allergy AS T1 JOIN allergy_type AS T2 ON T1.allergy = T2.allergy",
        zero_shot: "SELECT T1.stuid, T2.allergytype FROM has_allergy AS T1 JOIN allergies AS T2 ON T1.allergy = T2.allergy",
        treatment: &["SELECT T1.stuid, T2.allergytype FROM has_allergy AS T1 JOIN allergies AS T2 ON T1.allergy = T2.name"],
    },
    Item {
        db: ALLERGY,
        question: "Show allergies with their number of students.",
        truth: "SELECT allergy, count(*) FROM has_allergy GROUP BY allergy",
        zero_shot: "I cannot answer that question.",
        treatment: &["SELECT allergy FROM has_allergy GROUP BY allergy"],
    },
    Item {
        db: ALLERGY,
        question: "Which allergies does no student have?",
        truth: "SELECT allergy FROM allergy_type WHERE allergy NOT IN (SELECT allergy FROM has_allergy)",
        zero_shot: "SELECT allergy FROM allergy_type EXCEPT SELECT allergy FROM has_allergy",
        treatment: &[],
    },
];

pub const ZERO_SHOT_SUCCESSES: u64 = 12;
pub const FAILURES: u64 = 8;
pub const FIXES: u64 = 5;
pub const SCHEDULED_TRIALS: u64 = 18;

/// Trials the script schedules for item `i` (0 for zero-shot successes).
pub fn scheduled_trials(i: usize) -> usize {
    match i {
        4 | 5 => 1,
        7 | 15 => 2,
        12 => 3,
        10 | 17 | 18 => 3,
        _ => 0,
    }
}

fn column_list(tables: &[(&str, &[(&str, &str)])]) -> (Vec<serde_json::Value>, Vec<&'static str>) {
    let mut names = vec![json!([-1, "*"])];
    let mut types = vec!["text"];
    for (t, (_, cols)) in tables.iter().enumerate() {
        for (c, ty) in cols.iter() {
            names.push(json!([t, c]));
            types.push(if *ty == "number" { "number" } else { "text" });
        }
    }
    (names, types)
}

const MUSIC_TABLES: &[(&str, &[(&str, &str)])] = &[
    ("singer", &[("singer_id", "number"), ("name", "text"), ("country", "text"), ("age", "number")]),
    ("concert", &[("concert_id", "number"), ("concert_name", "text"), ("singer_id", "number"), ("year", "number")]),
];

const ALLERGY_TABLES: &[(&str, &[(&str, &str)])] = &[
    ("allergy_type", &[("allergy", "text"), ("allergytype", "text")]),
    ("has_allergy", &[("stuid", "number"), ("allergy", "text")]),
];

pub fn tables_json() -> String {
    let (music_cols, music_types) = column_list(MUSIC_TABLES);
    let (allergy_cols, allergy_types) = column_list(ALLERGY_TABLES);
    json!([
        {
            "db_id": MUSIC,
            "table_names_original": ["singer", "concert"],
            "column_names_original": music_cols,
            "column_types": music_types,
            "primary_keys": [1, 5],
            "foreign_keys": [[7, 1]],
        },
        {
            "db_id": ALLERGY,
            "table_names_original": ["allergy_type", "has_allergy"],
            "column_names_original": allergy_cols,
            "column_types": allergy_types,
            "primary_keys": [1],
            "foreign_keys": [[4, 1]],
        }
    ])
    .to_string()
}

fn create_db(path: &Path, sql: &str) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let conn = Connection::open(path).unwrap();
    conn.execute_batch(sql).unwrap();
}

pub const MUSIC_SQL: &str = "
CREATE TABLE singer (singer_id INTEGER PRIMARY KEY, name TEXT, country TEXT, age INTEGER);
INSERT INTO singer VALUES
  (1, 'Joe Sharp', 'Netherlands', 52), (2, 'Timbaland', 'United States', 32),
  (3, 'Justin Brown', 'France', 29), (4, 'Rose White', 'France', 41),
  (5, 'John Nizinik', 'France', 43), (6, 'Tribal King', 'France', 25);
CREATE TABLE concert (concert_id INTEGER PRIMARY KEY, concert_name TEXT,
  singer_id INTEGER REFERENCES singer(singer_id), year INTEGER);
INSERT INTO concert VALUES
  (1, 'Auditions', 1, 2014), (2, 'Super bootcamp', 2, 2014), (3, 'Home Visits', 3, 2015),
  (4, 'Week 1', 4, 2014), (5, 'Week 2', 4, 2015), (6, 'Final', 5, 2015);
";

pub const ALLERGY_SQL: &str = "
CREATE TABLE allergy_type (allergy TEXT PRIMARY KEY, allergytype TEXT);
INSERT INTO allergy_type VALUES
  ('Eggs', 'food'), ('Nuts', 'food'), ('Milk', 'food'), ('Cat', 'animal'),
  ('Dog', 'animal'), ('Grass', 'environmental'), ('Ragweed', 'environmental');
CREATE TABLE has_allergy (stuid INTEGER, allergy TEXT REFERENCES allergy_type(allergy));
INSERT INTO has_allergy VALUES
  (1001, 'Milk'), (1002, 'Eggs'), (1002, 'Cat'), (1003, 'Grass'), (1004, 'Nuts'), (1004, 'Milk');
";

pub fn questions_json(items: &[Item]) -> String {
    let v: Vec<_> = items
        .iter()
        .map(|i| json!({"db_id": i.db, "question": i.question, "query": i.truth}))
        .collect();
    serde_json::to_string_pretty(&v).unwrap()
}

/// Writes the dataset under `dir` and returns (root, question file).
pub fn write_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let root = dir.join("spider");
    fs::create_dir_all(&root).unwrap();
    fs::write(root.join("tables.json"), tables_json()).unwrap();
    create_db(&root.join("database/music/music.sqlite"), MUSIC_SQL);
    create_db(&root.join("database/allergy_1/allergy_1.sqlite"), ALLERGY_SQL);
    let questions = root.join("dev.json");
    fs::write(&questions, questions_json(&ITEMS)).unwrap();
    (root, questions)
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub root: PathBuf,
    pub questions: PathBuf,
    pub dataset: Dataset,
    pub runner: SqlRunner,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (root, questions) = write_dataset(dir.path());
        let dataset = Dataset::load(&root, &questions, &ExclusionList::default(), None).unwrap();
        let runner = dataset.runner(RunnerConfig::default());
        Fixture {
            dir,
            root,
            questions,
            dataset,
            runner,
        }
    }

    pub fn schema(&self, db: &str) -> &SchemaDescription {
        self.dataset.schema(db).unwrap()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn question_block(q: &str) -> String {
    format!("### Question\n{q}\n")
}

fn texts(list: &[&str]) -> Vec<MockResponse> {
    list.iter().map(|s| MockResponse::Text(s.to_string())).collect()
}

pub const DIAGNOSIS_REPLY: &str = "The failure is e3, with e5 also likely.";
pub const PRESCRIPTION_REPLY: &str = "REASON: The query does not match the question.\nINSTRUCTION: Rewrite the query so that it answers the question exactly.";

/// Zero-shot and treatment replies keyed by question; one shared diagnosis
/// and prescription reply.
pub fn mock_script(items: &[Item]) -> MockScript {
    let mut rules = Vec::new();
    for item in items {
        rules.push(MockRule {
            step: Some(Step::ZeroShot),
            contains: vec![question_block(item.question)],
            responses: texts(&[item.zero_shot]),
            ..Default::default()
        });
        if !item.treatment.is_empty() {
            for step in [Step::Treatment, Step::Generic] {
                rules.push(MockRule {
                    step: Some(step),
                    contains: vec![question_block(item.question)],
                    responses: texts(item.treatment),
                    ..Default::default()
                });
            }
        }
    }
    rules.push(MockRule {
        step: Some(Step::Diagnosis),
        responses: texts(&[DIAGNOSIS_REPLY]),
        ..Default::default()
    });
    rules.push(MockRule {
        step: Some(Step::Prescription),
        responses: texts(&[PRESCRIPTION_REPLY]),
        ..Default::default()
    });
    MockScript {
        rules,
        ..Default::default()
    }
}

pub const DIM: usize = 64;

pub fn embedder() -> HashEmbedder {
    HashEmbedder::new(DIM)
}

/// Labeled correction cases over the fixture schemas.
pub fn correction_cases(fx: &Fixture) -> Vec<CorrectionCase> {
    // (db, question, generated SQL, outcome, labels, correct SQL)
    type Row<'a> = (&'a str, &'a str, &'a str, OutcomeKind, &'a [u8], &'a str);
    let spec: &[Row] = &[
        (
            ALLERGY,
            "Which allergies are of type food?",
            "SELECT allergy FROM allergy_type WHERE allergytype = 'Food'",
            OutcomeKind::EmptyTable,
            &[3],
            "SELECT allergy FROM allergy_type WHERE allergytype = 'food'",
        ),
        (
            MUSIC,
            "Which countries do singers come from?",
            "SELECT country FROM singer",
            OutcomeKind::UndesiredResult,
            &[1],
            "SELECT DISTINCT country FROM singer",
        ),
        (
            MUSIC,
            "Name the singers with a concert in 2014.",
            "SELECT T2.name FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id",
            OutcomeKind::ExecutionError,
            &[8, 5],
            "SELECT T1.name FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id WHERE T2.year = 2014",
        ),
        (
            MUSIC,
            "Count the concerts per year.",
            "SELECT year, count(*) FROM concert",
            OutcomeKind::UndesiredResult,
            &[12],
            "SELECT year, count(*) FROM concert GROUP BY year",
        ),
        (
            ALLERGY,
            "How many distinct students have an allergy?",
            "SELECT count(*) FROM has_allergy",
            OutcomeKind::UndesiredResult,
            &[5],
            "SELECT count(DISTINCT stuid) FROM has_allergy",
        ),
        (
            MUSIC,
            "How old is the youngest singer?",
            "SELECT age FROM singer ORDER BY age LIMIT 1",
            OutcomeKind::Success,
            &[],
            "SELECT min(age) FROM singer",
        ),
        (
            MUSIC,
            "List concerts held after 2014.",
            "SELECT concert_name FROM concerts WHERE year > 2014",
            OutcomeKind::ExecutionError,
            &[8],
            "SELECT concert_name FROM concert WHERE year > 2014",
        ),
    ];
    spec.iter()
        .enumerate()
        .map(|(n, (db, q, sql, kind, labels, truth))| {
            let detail = match kind {
                OutcomeKind::ExecutionError => "no such column or table",
                _ => "",
            };
            let case = Case::new(
                fx.schema(db).clone(),
                *q,
                *sql,
                ExecutionOutcome::new(*kind, detail).unwrap(),
                None,
            )
            .unwrap();
            let ids: Vec<ErrorId> = if labels.is_empty() {
                vec![ErrorId::SUCCESS]
            } else {
                labels.iter().map(|&l| ErrorId::error(l).unwrap()).collect()
            };
            CorrectionCase::new(
                case,
                ids,
                *truth,
                format!("reason {n}"),
                format!("instruction {n}: compare the query with the question"),
            )
            .unwrap()
        })
        .collect()
}

pub fn fixture_kb(fx: &Fixture, embedder: &dyn BaseEmbedder, model: &ProjectionModel) -> KbStore {
    let mut kb = KbStore::for_model(model);
    for cc in correction_cases(fx) {
        kb.insert(cc, embedder, model).unwrap();
    }
    kb
}

/// Hand-labeled (ground truth, generated, expected outcome) triples over
/// the allergy database.
pub const CLASSIFIER_CASES: &[(&str, &str, OutcomeKind)] = &[
    (
        "SELECT DISTINCT allergy FROM allergy_type WHERE allergytype = 'food'",
        "SELECT DISTINCT allergy FROM allergy_type WHERE allergytype = \"Food\"",
        OutcomeKind::EmptyTable,
    ),
    (
        "SELECT DISTINCT allergy FROM allergy_type WHERE allergytype = 'food'",
        "SELECT DISTINCT allergy FROM allergy_type WHERE allergytype = \"food\"",
        OutcomeKind::Success,
    ),
    (
        "SELECT allergy FROM allergy_type WHERE allergytype = 'animal'",
        "SELECT allergy FROM allergy_type WHERE allergytype = 'animal' ORDER BY allergy DESC",
        OutcomeKind::Success,
    ),
    (
        "SELECT allergy FROM allergy_type WHERE allergytype = 'animal' ORDER BY allergy",
        "SELECT allergy FROM allergy_type WHERE allergytype = 'animal' ORDER BY allergy DESC",
        OutcomeKind::UndesiredResult,
    ),
    (
        "SELECT count(*) FROM has_allergy",
        "SELEC count(*) FROM has_allergy",
        OutcomeKind::ExecutionError,
    ),
    (
        "SELECT stuid FROM has_allergy",
        "SELECT student_id FROM has_allergy",
        OutcomeKind::ExecutionError,
    ),
    (
        "SELECT stuid FROM has_allergy",
        "SELECT stuid FROM allergies",
        OutcomeKind::ExecutionError,
    ),
    (
        "SELECT stuid FROM has_allergy",
        "SELECT stuid, allergy FROM has_allergy",
        OutcomeKind::UndesiredResult,
    ),
    (
        "SELECT DISTINCT stuid FROM has_allergy",
        "SELECT stuid FROM has_allergy",
        OutcomeKind::UndesiredResult,
    ),
    (
        "SELECT allergy AS name FROM allergy_type",
        "SELECT allergy FROM allergy_type",
        OutcomeKind::Success,
    ),
    (
        "SELECT avg(stuid) FROM has_allergy",
        "SELECT sum(stuid) * 1.0 / count(*) FROM has_allergy",
        OutcomeKind::Success,
    ),
    (
        "SELECT allergy FROM allergy_type WHERE allergytype = 'plant'",
        "SELECT allergy FROM allergy_type WHERE allergytype = 'tree'",
        OutcomeKind::Success,
    ),
    (
        "SELECT allergy FROM allergy_type WHERE allergytype = 'plant'",
        "SELECT allergy FROM allergy_type WHERE allergytype = 'food'",
        OutcomeKind::UndesiredResult,
    ),
    (
        "SELECT max(stuid) FROM has_allergy WHERE allergy = 'Pollen'",
        "SELECT 0",
        OutcomeKind::UndesiredResult,
    ),
    (
        "SELECT max(stuid) FROM has_allergy WHERE allergy = 'Pollen'",
        "SELECT NULL",
        OutcomeKind::Success,
    ),
    (
        "SELECT count(*) FROM has_allergy",
        "SELECT 6.0",
        OutcomeKind::Success,
    ),
    (
        "SELECT stuid FROM has_allergy WHERE allergy = 'Milk'",
        "SELECT stuid FROM has_allergy WHERE allergy = 'milk'",
        OutcomeKind::EmptyTable,
    ),
];

/// Runner with only the allergy database registered as `allergy_1`.
pub fn allergy_runner(dir: &Path) -> SqlRunner {
    let path = dir.join("allergy.sqlite");
    create_db(&path, ALLERGY_SQL);
    let mut runner = SqlRunner::new(RunnerConfig::default());
    runner.register(ALLERGY, path);
    runner
}

/// Hand-labeled queries for top-level ORDER BY detection.
pub const ORDER_BY_CASES: &[(&str, bool)] = &[
    ("SELECT name FROM singer ORDER BY age", true),
    ("select name from singer order by age desc limit 3", true),
    ("SELECT name FROM singer", false),
    ("SELECT name FROM singer WHERE name = 'ORDER BY'", false),
    ("SELECT name FROM singer WHERE note = \"order by age\"", false),
    ("SELECT name FROM (SELECT name, age FROM singer ORDER BY age LIMIT 3)", false),
    ("SELECT name FROM (SELECT name FROM singer ORDER BY age) ORDER BY name", true),
    ("SELECT `order` FROM t", false),
    ("SELECT [order by] FROM t", false),
    ("SELECT a FROM t -- ORDER BY a", false),
    ("SELECT a FROM t /* ORDER BY a */", false),
    ("SELECT a FROM t\nORDER\n  BY a", true),
    ("SELECT a FROM t ORDER   BY a", true),
    ("SELECT a FROM t WHERE b IN (SELECT b FROM u ORDER BY b)", false),
    ("SELECT a FROM t UNION SELECT a FROM u ORDER BY a", true),
    ("SELECT a, count(*) FROM t GROUP BY a", false),
    ("SELECT a FROM t GROUP BY a ORDER BY count(*) DESC LIMIT 1", true),
    ("SELECT orderby FROM t", false),
    ("SELECT a FROM t WHERE x = 'it''s ORDER BY'", false),
    ("SELECT a FROM t ORDER BY a; SELECT b FROM u", true),
];

pub fn random_unit(rng: &mut impl rand::Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Minimal valid correction case carrying `labels`.
pub fn labeled_case(n: usize, labels: Vec<ErrorId>) -> CorrectionCase {
    let schema = SchemaDescription {
        db_id: "db".into(),
        tables: vec![ecpt::case::Table::new("t", [("a", "number")])],
        primary_keys: vec![],
        foreign_keys: vec![],
    };
    let case = Case::new(
        schema,
        format!("question {n}"),
        "SELECT a FROM t",
        ExecutionOutcome::new(OutcomeKind::UndesiredResult, "mismatch").unwrap(),
        None,
    )
    .unwrap();
    CorrectionCase::new(case, labels, "SELECT a FROM t WHERE a > 0", "reason", "instruction").unwrap()
}

/// Store of `n` random unit vectors (every seventh one a duplicate of its
/// predecessor, to exercise tie-breaking) with random single labels.
pub fn random_kb(n: usize, dim: usize, seed: u64) -> (KbStore, Vec<Vec<f64>>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut kb = KbStore::new(dim, "random");
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let v = if i % 7 == 6 { vectors[i - 1].clone() } else { random_unit(&mut rng, dim) };
        let label = ErrorId::error(rng.gen_range(1..=13)).unwrap();
        let vector = ecpt::embedding::EmbeddingVector::from_unit(v.clone()).unwrap();
        let id = kb.insert_vector(labeled_case(i, vec![label]), vector).unwrap();
        assert_eq!(id, i as u64);
        vectors.push(v);
    }
    (kb, vectors)
}

/// Brute-force ranking: independent dot products, full sort by
/// (similarity desc, id asc), truncated to k.
pub fn brute_force(vectors: &[Vec<f64>], eligible: &[bool], query: &[f64], k: usize) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = vectors
        .iter()
        .enumerate()
        .filter(|(i, _)| eligible[*i])
        .map(|(i, v)| (i as u64, v.iter().zip(query).map(|(a, b)| a * b).sum()))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Synthetic labeled base vectors: `per_label` noisy copies of a random
/// prototype per label, plus a large shared nuisance component along a few
/// fixed directions that a linear projection can learn to suppress.
pub fn synthetic_labeled(labels: usize, per_label: usize, dim: usize, seed: u64) -> Vec<(ecpt::embedding::EmbeddingVector, usize)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..labels).map(|_| random_unit(&mut rng, dim)).collect();
    let nuisance: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, dim)).collect();
    let mut out = Vec::new();
    for (label, proto) in prototypes.iter().enumerate() {
        for _ in 0..per_label {
            let mut v = proto.clone();
            for dir in &nuisance {
                let c: f64 = rng.gen_range(-1.5..1.5);
                v.iter_mut().zip(dir).for_each(|(x, d)| *x += c * d);
            }
            v.iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
            out.push((ecpt::embedding::EmbeddingVector::normalized(v).unwrap(), label));
        }
    }
    out
}

/// Reference ablation rows: (fixed cases out of 247, correction %, execution %),
/// with 785 zero-shot successes out of 1,032 cases.
pub const ABLATION_ROWS: &[(u64, &str, &str)] = &[
    (0, "0.00%", "76.07%"),
    (28, "11.34%", "78.78%"),
    (35, "14.17%", "79.46%"),
    (36, "14.57%", "79.55%"),
    (91, "36.84%", "84.88%"),
    (124, "50.20%", "88.08%"),
    (109, "44.13%", "86.63%"),
    (119, "48.18%", "87.60%"),
    (125, "50.61%", "88.18%"),
];
pub const TOTAL_CASES: u64 = 1032;
pub const ERROR_CASES: u64 = 247;

/// Reference cost rows: (successful trials, trials, hit rate, prompt tokens,
/// completion tokens, model, total cost).
pub const COST_ROWS: &[(u64, u64, &str, u64, u64, &str, &str)] = &[
    (35, 687, "5.09%", 2_020_555, 129_455, "gpt-3.5-turbo", "$6.58"),
    (124, 539, "23.01%", 1_665_553, 119_112, "gpt-4-turbo", "$20.23"),
    (125, 525, "23.81%", 2_808_228, 120_913, "gpt-4-turbo", "$31.71"),
];

pub fn example_pricing() -> ecpt::metrics::PricingTable {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/example.toml")).unwrap();
    ecpt::config::RunConfig::parse(&text).unwrap().pricing
}

fn outcome(kind: OutcomeKind) -> ExecutionOutcome {
    ExecutionOutcome::new(kind, if kind == OutcomeKind::ExecutionError { "error" } else { "" }).unwrap()
}

/// Builds results directly: `successes` zero-shot successes, then one error
/// case per entry of `fixed_at` (fixed on that trial) and `unfixed`
/// error cases that use `max_trials` failing trials each. All token usage is
/// put on the first result.
pub fn synthetic_results(
    successes: usize,
    fixed_at: &[usize],
    unfixed: usize,
    max_trials: usize,
    usage: ecpt::llm::Usage,
) -> Vec<ecpt::pipeline::CaseResult> {
    use ecpt::pipeline::{CaseResult, ItemRef, TrialRecord};
    let mut out = Vec::new();
    let mut push = |zero_shot: ExecutionOutcome, trials: Vec<ExecutionOutcome>| {
        let index = out.len();
        let item_ref = ItemRef {
            index,
            db_id: "db".into(),
            question_hash: index as u64,
        };
        let trials: Vec<TrialRecord> = trials
            .into_iter()
            .enumerate()
            .map(|(t, o)| TrialRecord {
                item_ref: item_ref.clone(),
                trial_index: t + 1,
                diagnosis: None,
                retrieved_ids: vec![],
                candidate_sql: "SELECT 1".into(),
                outcome: o,
                prompt_tokens: 0,
                completion_tokens: 0,
                failure: None,
            })
            .collect();
        let final_outcome = trials.last().map_or(zero_shot.clone(), |t| t.outcome.clone());
        out.push(CaseResult {
            item_ref,
            excluded: false,
            zero_shot_sql: Some("SELECT 1".into()),
            zero_shot_outcome: Some(zero_shot),
            zero_shot_usage: ecpt::llm::Usage::default(),
            final_outcome: Some(final_outcome),
            trials,
            error: None,
        });
    };
    for _ in 0..successes {
        push(outcome(OutcomeKind::Success), vec![]);
    }
    for &t in fixed_at {
        let mut trials = vec![outcome(OutcomeKind::UndesiredResult); t - 1];
        trials.push(outcome(OutcomeKind::Success));
        push(outcome(OutcomeKind::EmptyTable), trials);
    }
    for _ in 0..unfixed {
        push(
            outcome(OutcomeKind::ExecutionError),
            vec![outcome(OutcomeKind::UndesiredResult); max_trials],
        );
    }
    if let Some(first) = out.first_mut() {
        first.zero_shot_usage = usage;
    }
    out
}

/// Trial split for 124 fixes in 539 trials over 247 error cases: 88 fixed
/// on trial 1, 26 on trial 2, 10 on trial 3, 123 unfixed × 3.
pub fn gpt4_trial_schedule() -> Vec<usize> {
    let mut v = vec![1; 88];
    v.extend(vec![2; 26]);
    v.extend(vec![3; 10]);
    v
}

/// Chat backend that records every prompt before delegating.
pub struct Recording {
    pub inner: ecpt::llm::MockBackend,
    pub prompts: std::sync::Mutex<Vec<String>>,
}

impl Recording {
    pub fn new(script: MockScript) -> Self {
        Self {
            inner: ecpt::llm::MockBackend::new(script),
            prompts: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self, step: ecpt::llm::Step) -> Vec<String> {
        let all = self.prompts.lock().unwrap();
        all.iter().filter(|p| ecpt::llm::Step::of_prompt(p) == Some(step)).cloned().collect()
    }
}

impl ecpt::llm::ChatBackend for Recording {
    fn complete(&self, request: &ecpt::llm::LlmRequest) -> ecpt::Result<ecpt::llm::LlmResponse> {
        self.prompts.lock().unwrap().push(request.prompt.clone());
        self.inner.complete(request)
    }
}

/// Every template rendered for the EmptyTable fixture item, keyed by
/// snapshot file name.
pub fn golden_prompts(fx: &Fixture) -> Vec<(&'static str, String)> {
    use ecpt::llm::*;
    let item = &ITEMS[12];
    let case = Case::new(
        fx.schema(item.db).clone(),
        item.question,
        item.zero_shot,
        ExecutionOutcome::new(OutcomeKind::EmptyTable, "generated query returned no rows; expected 2").unwrap(),
        None,
    )
    .unwrap();
    let kb_cases = correction_cases(fx);
    let diagnosis = parse_diagnosis(DIAGNOSIS_REPLY).unwrap();
    let prescription = parse_prescription(PRESCRIPTION_REPLY).unwrap();
    let mut examples = OptionBExamples::new();
    examples.insert(ErrorId::error(3).unwrap(), kb_cases[0].clone());
    examples.insert(ErrorId::error(5).unwrap(), kb_cases[4].clone());
    vec![
        ("zero_shot.txt", render_zero_shot(&case.schema, &case.question)),
        ("diagnosis.txt", render_diagnosis(&case, None)),
        ("diagnosis_option_b.txt", render_diagnosis(&case, Some(&examples))),
        ("prescription.txt", render_prescription(&case, &diagnosis, &[&kb_cases[0], &kb_cases[4]])),
        ("treatment.txt", render_treatment(&case, &prescription)),
        ("generic.txt", render_generic(&case)),
    ]
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares `text` with the stored snapshot; `ECPT_BLESS=1` rewrites it.
pub fn check_golden(name: &str, text: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("ECPT_BLESS").is_some() {
        fs::create_dir_all(golden_dir()).unwrap();
        fs::write(&path, text).unwrap();
        return Ok(());
    }
    let stored = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if stored == text {
        Ok(())
    } else {
        let line = stored.lines().zip(text.lines()).position(|(a, b)| a != b);
        Err(format!("{name} differs from snapshot (first differing line {line:?})"))
    }
}

/// Number of error-type rows (`e1`..`e13`) in a rendered prompt.
pub fn error_row_count(prompt: &str) -> usize {
    prompt
        .lines()
        .filter(|l| {
            l.split_whitespace()
                .next()
                .and_then(|w| w.parse::<ErrorId>().ok())
                .is_some_and(|id| !id.is_success())
        })
        .count()
}

/// Runs the fixture corpus through the scripted pipeline while recording
/// prompts, and returns the treatment prompts that contain their own
/// item's ground-truth SQL.
pub fn treatment_leaks(fx: &Fixture, options: ecpt::pipeline::PipelineOptions) -> (usize, Vec<String>) {
    use std::sync::Arc;
    let embedder = embedder();
    let model = ProjectionModel::identity(DIM);
    let kb = fixture_kb(fx, &embedder, &model);
    let backend = Arc::new(Recording::new(mock_script(&ITEMS)));
    let gateway = ecpt::llm::LlmGateway::new(backend.clone(), ecpt::llm::GatewayConfig::default());
    let p = ecpt::pipeline::Pipeline::new(&gateway, &fx.runner, &fx.dataset.schemas, &kb, &embedder, &model, options)
        .unwrap();
    p.run_dataset(&fx.dataset.items, &Default::default()).unwrap();
    let prompts = backend.prompts(ecpt::llm::Step::Treatment);
    // The failing SQL may legitimately share a prefix with the truth, so
    // only the other sections are searched.
    let without_failing_sql = |p: &str| -> String {
        p.split("\n### ")
            .filter(|s| !s.starts_with("Failing SQL"))
            .collect::<Vec<_>>()
            .join("\n### ")
    };
    let leaks = prompts
        .iter()
        .filter(|p| {
            let rest = without_failing_sql(p);
            ITEMS
                .iter()
                .any(|i| p.contains(&question_block(i.question)) && rest.contains(i.truth))
        })
        .cloned()
        .collect();
    (prompts.len(), leaks)
}

/// Independent implementation of the projected triplet loss:
/// max(0, |ŷa − ŷp|² − |ŷa − ŷn|² + margin) with ŷ = Wx / |Wx|.
pub fn oracle_loss(w: &[f64], dim: usize, a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let project = |x: &[f64]| -> Vec<f64> {
        let u: Vec<f64> = (0..dim).map(|i| (0..dim).map(|j| w[i * dim + j] * x[j]).sum()).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter().map(|v| v / norm).collect()
    };
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let (ya, yp, yn) = (project(a), project(p), project(n));
    (sq(&ya, &yp) - sq(&ya, &yn) + margin).max(0.0)
}

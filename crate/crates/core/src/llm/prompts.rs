//! The five prompt templates. All renderers are pure.

use std::collections::BTreeMap;

use super::{Diagnosis, Prescription, Step};
use crate::case::{error_type_table_text, render_schema, serialize_case, Case, CorrectionCase, ErrorId, SchemaDescription};

/// Default prompt budget in approximate tokens.
pub const PROMPT_TOKEN_BUDGET: usize = 4_000;

/// One example correction case per error type, shown beside its table row.
pub type OptionBExamples = BTreeMap<ErrorId, CorrectionCase>;

/// Rough token count at four characters per token.
pub fn approx_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

fn indent(text: &str, prefix: &str) -> String {
    text.lines().map(|l| format!("{prefix}{l}\n")).collect()
}

fn block(out: &mut String, title: &str, body: &str) {
    out.push_str("\n### ");
    out.push_str(title);
    out.push('\n');
    out.push_str(body);
    if !body.ends_with('\n') {
        out.push('\n');
    }
}

pub fn render_zero_shot(schema: &SchemaDescription, question: &str) -> String {
    let mut out = format!(
        "{}\nWrite a SQLite query that answers the question using the database schema below.\n",
        Step::ZeroShot.marker()
    );
    block(&mut out, "Schema", &render_schema(schema));
    block(&mut out, "Question", question);
    block(&mut out, "Answer", "Respond with a single SQL statement and nothing else.");
    out
}

fn is_error_row(line: &str) -> Option<ErrorId> {
    let id = line.split_whitespace().next()?;
    id.parse::<ErrorId>().ok().filter(|i| !i.is_success())
}

/// New error case, the error-type table and (optionally) one example per
/// listed type placed directly under its row.
pub fn render_diagnosis(case: &Case, option_b_examples: Option<&OptionBExamples>) -> String {
    let mut out = format!(
        "{}\nThe SQL below was generated for the question but its execution result is wrong. \
         Decide which error types explain the failure.\n",
        Step::Diagnosis.marker()
    );
    block(&mut out, "Error case", &serialize_case(case, true));
    let mut table = String::new();
    for line in error_type_table_text().lines() {
        table.push_str(line);
        table.push('\n');
        let example = is_error_row(line).and_then(|id| option_b_examples.and_then(|m| m.get(&id).map(|c| (id, c))));
        if let Some((id, example)) = example {
            table.push_str(&format!("    Example of {id}:\n"));
            table.push_str(&indent(&serialize_case(&example.case, true), "    | "));
            if !example.reason.is_empty() {
                table.push_str(&format!("    | REASON: {}\n", example.reason.replace('\n', " ")));
            }
        }
    }
    block(&mut out, "Error types", &table);
    block(
        &mut out,
        "Answer",
        "Output only the ids of the error types that apply (for example: e3, e5), \
         ordered from most to least severe.",
    );
    out
}

/// New case, diagnosed types, retrieved examples (in rank order) and the
/// fill-in slots for reason and instruction.
pub fn render_prescription(case: &Case, diagnosis: &Diagnosis, retrieved: &[&CorrectionCase]) -> String {
    let mut out = format!(
        "{}\nExplain why the SQL failed and write an instruction for fixing it. \
         Use the similar cases as guidance.\n",
        Step::Prescription.marker()
    );
    block(&mut out, "Error case", &serialize_case(case, true));
    let diagnosed: String = diagnosis
        .ids()
        .iter()
        .map(|id| {
            let t = id.error_type();
            format!("- {id} {}: {}\n", t.name, t.short_explanation)
        })
        .collect();
    block(&mut out, "Diagnosed error types", &diagnosed);
    let mut examples = String::new();
    if retrieved.is_empty() {
        examples.push_str("(no similar cases)\n");
    }
    for (i, cc) in retrieved.iter().enumerate() {
        let ids: Vec<String> = cc.error_types.iter().map(ErrorId::to_string).collect();
        examples.push_str(&format!("#### Example {}\n", i + 1));
        examples.push_str(&serialize_case(&cc.case, true));
        examples.push_str(&format!("ERROR TYPES: {}\n", ids.join(", ")));
        examples.push_str(&format!("CORRECT SQL: {}\n", cc.ground_truth_sql));
        examples.push_str(&format!("REASON: {}\n", cc.reason));
        examples.push_str(&format!("INSTRUCTION: {}\n", cc.instruction));
    }
    block(&mut out, "Similar cases", &examples);
    block(
        &mut out,
        "Answer",
        "Fill in both fields for the error case.\nREASON: <why the SQL failed>\nINSTRUCTION: <how to fix the SQL>",
    );
    out
}

/// Schema, question, failing SQL and the instruction to apply. Never sees
/// ground truth.
pub fn render_treatment(case: &Case, prescription: &Prescription) -> String {
    let mut out = format!(
        "{}\nRewrite the failing SQL so that it answers the question, following the instruction.\n",
        Step::Treatment.marker()
    );
    block(&mut out, "Schema", &render_schema(&case.schema));
    block(&mut out, "Question", &case.question);
    block(&mut out, "Failing SQL", &case.generated_sql);
    block(&mut out, "Instruction", &prescription.instruction);
    block(&mut out, "Answer", "Respond with exactly one corrected SQL statement and nothing else.");
    out
}

/// Baseline self-correction prompt: no diagnosis, no retrieval.
pub fn render_generic(case: &Case) -> String {
    let mut out = format!(
        "{}\nCheck the SQLite query against the schema and question. If it has problems, fix them; \
         otherwise return it unchanged.\n",
        Step::Generic.marker()
    );
    block(&mut out, "Schema", &render_schema(&case.schema));
    block(&mut out, "Question", &case.question);
    block(&mut out, "SQL", &case.generated_sql);
    block(&mut out, "Answer", "Respond with exactly one SQL statement and nothing else.");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{ColumnRef, ExecutionOutcome, OutcomeKind, Table};

    fn schema() -> SchemaDescription {
        SchemaDescription {
            db_id: "allergy_1".into(),
            tables: vec![
                Table::new("Allergy_Type", [("Allergy", "text"), ("AllergyType", "text")]),
                Table::new("Has_Allergy", [("StuID", "number"), ("Allergy", "text")]),
            ],
            primary_keys: vec![],
            foreign_keys: vec![(ColumnRef::new("Has_Allergy", "Allergy"), ColumnRef::new("Allergy_Type", "Allergy"))],
        }
    }

    fn case() -> Case {
        Case::new(
            schema(),
            "What are all the different food allergies?",
            "SELECT DISTINCT Allergy FROM Allergy_Type WHERE AllergyType = \"Food\"",
            ExecutionOutcome::new(OutcomeKind::EmptyTable, "no rows").unwrap(),
            None,
        )
        .unwrap()
    }

    fn correction(label: u8, n: usize) -> CorrectionCase {
        CorrectionCase::new(
            case(),
            vec![ErrorId::error(label).unwrap()],
            format!("SELECT {n}"),
            format!("reason {n}"),
            format!("instruction text {n}"),
        )
        .unwrap()
    }

    fn error_rows(prompt: &str) -> Vec<&str> {
        prompt.lines().filter(|l| is_error_row(l).is_some()).collect()
    }

    #[test]
    fn zero_shot_contents() {
        let p = render_zero_shot(&schema(), "q?");
        assert_eq!(p.matches("FOREIGN KEY").count(), 1);
        assert!(p.contains("q?"));
        assert_eq!(p, render_zero_shot(&schema(), "q?"));
        assert!(approx_tokens(&p) < PROMPT_TOKEN_BUDGET);
    }

    #[test]
    fn diagnosis_rows_and_examples() {
        let p = render_diagnosis(&case(), None);
        assert_eq!(error_rows(&p).len(), 13);
        assert!(!p.contains("Example of"));
        assert_eq!(p, render_diagnosis(&case(), None));

        let examples: OptionBExamples = ErrorId::errors().map(|id| (id, correction(id.number(), 0))).collect();
        let p = render_diagnosis(&case(), Some(&examples));
        assert_eq!(error_rows(&p).len(), 13);
        let lines: Vec<&str> = p.lines().collect();
        for (i, l) in lines.iter().enumerate() {
            if let Some(id) = is_error_row(l) {
                assert_eq!(lines[i + 1], format!("    Example of {id}:"));
            }
        }
        assert_eq!(p.matches("Example of").count(), 13);
    }

    #[test]
    fn prescription_examples_in_order() {
        let d = Diagnosis::new(vec![ErrorId::error(3).unwrap()]).unwrap();
        let empty = render_prescription(&case(), &d, &[]);
        assert!(empty.contains("(no similar cases)"));
        assert!(empty.contains("Other:Not Enough Value Information"));
        let cs = [correction(3, 1), correction(3, 2), correction(5, 3)];
        let refs: Vec<&CorrectionCase> = cs.iter().collect();
        let p = render_prescription(&case(), &d, &refs);
        let pos: Vec<usize> = (1..=3).map(|i| p.find(&format!("#### Example {i}")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        for c in &cs {
            assert!(p.contains(&c.instruction));
        }
    }

    #[test]
    fn treatment_contents() {
        let pr = Prescription {
            reason: "case mismatch".into(),
            instruction: "Use lowercase 'food'.".into(),
        };
        let p = render_treatment(&case(), &pr);
        assert!(p.contains(&case().generated_sql));
        assert!(p.contains("Use lowercase 'food'."));
        assert!(!p.contains("case mismatch"));
        assert_eq!(p, render_treatment(&case(), &pr));
    }
}

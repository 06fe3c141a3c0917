use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use super::taxonomy::csv_error;
use super::{Cohort, FeatureSchema, Outcome, Taxonomy};
use crate::error::{Error, Result};

fn expected_header(schema: &FeatureSchema) -> Vec<String> {
    let mut h = vec![
        "patient_id".to_string(),
        "visit_id".to_string(),
        "granular_race".to_string(),
    ];
    h.extend(schema.names().map(str::to_string));
    h.extend(Outcome::ALL.iter().map(|o| o.column().to_string()));
    h
}

/// Reads a cohort file: `patient_id,visit_id,granular_race,<features...>,y_hosp,y_crit,y_revisit`.
/// Empty feature fields are missing values. Row order is preserved.
pub fn load_cohort(
    path: impl AsRef<Path>,
    schema: Arc<FeatureSchema>,
    taxonomy: Arc<Taxonomy>,
) -> Result<Cohort> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = expected_header(&schema);
    if header != expected {
        let at = header
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(header.len().min(expected.len()));
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header mismatch at column {}: expected {:?}, found {:?}",
                at + 1,
                expected.get(at),
                header.get(at)
            ),
        });
    }
    let lookup = taxonomy.granular_lookup();
    let p = schema.len();
    let mut builder = Cohort::builder(schema.clone(), taxonomy.clone());
    let mut record = csv::StringRecord::new();
    let mut features = vec![0.0; p];
    loop {
        let more = reader
            .read_record(&mut record)
            .map_err(|e| csv_error(path, e))?;
        if !more {
            break;
        }
        let line = record.position().map(|q| q.line() as usize).unwrap_or(0);
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() != expected.len() {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                expected.len(),
                record.len()
            )));
        }
        let group = &record[2];
        let g = *lookup.get(group).ok_or_else(|| Error::UnknownGroup {
            line,
            id: group.to_string(),
        })?;
        for (j, slot) in features.iter_mut().enumerate() {
            let field = record[3 + j].trim();
            *slot = if field.is_empty() {
                f64::NAN
            } else {
                field.parse::<f64>().map_err(|_| {
                    parse_err(format!(
                        "feature {:?}: cannot parse {field:?}",
                        schema.get(j).name
                    ))
                })?
            };
        }
        let mut outcomes = [0u8; 3];
        for (k, y) in outcomes.iter_mut().enumerate() {
            *y = match record[3 + p + k].trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(parse_err(format!(
                        "{}: expected 0 or 1, found {other:?}",
                        Outcome::ALL[k].column()
                    )))
                }
            };
        }
        builder
            .push(&record[0], &record[1], g, &features, outcomes)
            .map_err(|e| match e {
                Error::DuplicateVisit { patient, visit, .. } => Error::DuplicateVisit {
                    line,
                    patient,
                    visit,
                },
                other => other,
            })?;
    }
    Ok(builder.build())
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Writes the cohort in the format read by [`load_cohort`]. Values use the
/// shortest decimal that round-trips exactly.
pub fn write_cohort(c: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let io = |e: csv::Error| csv_error(path, e);
    w.write_record(expected_header(c.schema())).map_err(io)?;
    let names = c.taxonomy().granular_names();
    let mut rec: Vec<String> = Vec::with_capacity(c.n_features() + 6);
    for i in 0..c.len() {
        rec.clear();
        rec.push(c.patient_id(i).to_string());
        rec.push(c.visit_id(i).to_string());
        rec.push(names[c.granular_of(i)].clone());
        rec.extend(c.row(i).iter().map(|&v| fmt_value(v)));
        rec.extend(c.outcome_row(i).iter().map(|y| y.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_schema, tiny_taxonomy};
    use super::*;

    const HEADER: &str =
        "patient_id,visit_id,granular_race,age,gender,triage_heartrate,triage_acuity,y_hosp,y_crit,y_revisit\n";

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("c.csv");
        std::fs::write(&p, format!("{HEADER}{body}")).unwrap();
        p
    }

    #[test]
    fn loads_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "p1,v1,A*,40,1,80,3,1,0,0\np1,v2,A*,41,1,,2,0,0,1\np2,v3,B1,70.5,0,120,1,1,1,0\n",
        );
        let c = load_cohort(&p, tiny_schema(), tiny_taxonomy()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.n_patients(), 2);
        assert!(c.value(1, 2).is_nan());
        assert_eq!(c.outcome(Outcome::Revisit), &[0, 1, 0]);
        assert_eq!(c.taxonomy().granular_names()[c.granular_of(2)], "B1");

        let out = dir.path().join("out.csv");
        write_cohort(&c, &out).unwrap();
        assert_eq!(load_cohort(&out, tiny_schema(), tiny_taxonomy()).unwrap(), c);
    }

    #[test]
    fn unknown_group_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "p1,v1,A*,40,1,80,3,1,0,0\np2,v2,Martian,40,1,80,3,1,0,0\n");
        match load_cohort(&p, tiny_schema(), tiny_taxonomy()) {
            Err(Error::UnknownGroup { line, id }) => {
                assert_eq!(line, 3);
                assert_eq!(id, "Martian");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "p1,v1,A*,40,1,80,3,1,0,0\np2,v2,A*,forty,1,80,3,1,0,0\n");
        assert!(matches!(
            load_cohort(&p, tiny_schema(), tiny_taxonomy()),
            Err(Error::Parse { line: 3, .. })
        ));
        let p = write(&dir, "p1,v1,A*,40,1,80,3,2,0,0\n");
        assert!(matches!(
            load_cohort(&p, tiny_schema(), tiny_taxonomy()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_visit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "p1,v1,A*,40,1,80,3,1,0,0\np1,v1,A*,40,1,80,3,1,0,0\n");
        assert!(matches!(
            load_cohort(&p, tiny_schema(), tiny_taxonomy()),
            Err(Error::DuplicateVisit { line: 3, .. })
        ));
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "patient_id,visit_id,race\n").unwrap();
        assert!(matches!(
            load_cohort(&p, tiny_schema(), tiny_taxonomy()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}

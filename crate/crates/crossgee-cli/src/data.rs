//! Long-format CSV input: columns `unit_id,k,y,x1,...,xp`, one row per
//! (unit, measurement). Units are ordered by first appearance; every unit
//! must contribute each measurement index `1..l` exactly once, where `l` is
//! the largest `k` seen. Parse errors carry 1-based line numbers.

use nalgebra::{DMatrix, DVector};

use crossgee::model::{Dataset, ObservationBlock};

#[derive(Debug)]
pub struct CsvError(pub String);

impl std::fmt::Display for CsvError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for CsvError {}

struct Row {
    line: usize,
    unit: String,
    k: usize,
    y: f64,
    x: Vec<f64>,
}

pub fn parse_dataset(text: &str) -> Result<Dataset<f64>, CsvError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CsvError("empty CSV file".into()))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < 4 || cols[0] != "unit_id" || cols[1] != "k" || cols[2] != "y" {
        return Err(CsvError(
            "line 1: header must be unit_id,k,y,x1,...,xp".into(),
        ));
    }
    let p = cols.len() - 3;
    for (j, c) in cols[3..].iter().enumerate() {
        let expected = format!("x{}", j + 1);
        if *c != expected {
            return Err(CsvError(format!(
                "line 1: covariate column {} must be named {expected}, found {c}",
                j + 4
            )));
        }
    }

    let mut rows: Vec<Row> = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != cols.len() {
            return Err(CsvError(format!(
                "line {line}: expected {} fields, found {}",
                cols.len(),
                fields.len()
            )));
        }
        let k: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| CsvError(format!("line {line}: k must be a positive integer")))?;
        if k == 0 {
            return Err(CsvError(format!("line {line}: k is 1-based")));
        }
        let y: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| CsvError(format!("line {line}: y is not a number")))?;
        let mut x = Vec::with_capacity(p);
        for (j, f) in fields[3..].iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                CsvError(format!("line {line}: x{} is not a number", j + 1))
            })?;
            x.push(v);
        }
        rows.push(Row {
            line,
            unit: fields[0].trim().to_string(),
            k,
            y,
            x,
        });
    }
    if rows.is_empty() {
        return Err(CsvError("no data rows".into()));
    }
    let l = rows.iter().map(|r| r.k).max().expect("nonempty");

    // Group rows per unit in first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::HashMap<String, Vec<&Row>> = std::collections::HashMap::new();
    for row in &rows {
        grouped
            .entry(row.unit.clone())
            .or_insert_with(|| {
                order.push(row.unit.clone());
                Vec::new()
            })
            .push(row);
    }

    let mut blocks = Vec::with_capacity(order.len());
    for unit in &order {
        let unit_rows = &grouped[unit];
        let mut seen = vec![None::<&Row>; l];
        for row in unit_rows {
            if row.k > l {
                unreachable!();
            }
            if seen[row.k - 1].is_some() {
                return Err(CsvError(format!(
                    "line {}: duplicate measurement k={} for unit {unit}",
                    row.line, row.k
                )));
            }
            seen[row.k - 1] = Some(row);
        }
        let mut y = DVector::zeros(l);
        let mut x = DMatrix::zeros(rows[0].x.len(), l);
        for (k, slot) in seen.iter().enumerate() {
            let row = slot.ok_or_else(|| {
                CsvError(format!(
                    "unit {unit}: missing measurement k={} (dataset is not rectangular)",
                    k + 1
                ))
            })?;
            y[k] = row.y;
            for (j, v) in row.x.iter().enumerate() {
                x[(j, k)] = *v;
            }
        }
        blocks.push(
            ObservationBlock::new(y, x)
                .map_err(|e| CsvError(format!("unit {unit}: {e}")))?,
        );
    }
    Dataset::new(blocks).map_err(|e| CsvError(e.to_string()))
}

/// Serialize a dataset back into the long CSV format.
#[cfg(test)]
pub fn dataset_to_csv(data: &Dataset<f64>) -> String {
    let p = data.p();
    let mut out = String::from("unit_id,k,y");
    for j in 1..=p {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (i, block) in data.blocks().iter().enumerate() {
        for k in 0..data.l() {
            out.push_str(&format!("{},{},{}", i + 1, k + 1, block.y()[k]));
            for j in 0..p {
                out.push_str(&format!(",{}", block.x()[(j, k)]));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_grouping() {
        let csv = "unit_id,k,y,x1,x2\n\
                   a,1,1.5,0.1,0.2\n\
                   a,2,-0.5,0.3,0.4\n\
                   b,2,2.5,0.7,0.8\n\
                   b,1,0.5,0.5,0.6\n";
        let data = parse_dataset(csv).unwrap();
        assert_eq!(data.n(), 2);
        assert_eq!(data.p(), 2);
        assert_eq!(data.l(), 2);
        // Unit a first, measurements sorted by k.
        assert_eq!(data.block(0).y().as_slice(), &[1.5, -0.5]);
        assert_eq!(data.block(1).y().as_slice(), &[0.5, 2.5]);
        assert_eq!(data.block(1).x()[(0, 0)], 0.5);

        let back = dataset_to_csv(&data);
        let again = parse_dataset(&back).unwrap();
        assert_eq!(again.block(1).y().as_slice(), data.block(1).y().as_slice());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad_field = "unit_id,k,y,x1\n1,1,0.5,0.1\n1,2,oops,0.2\n";
        let err = parse_dataset(bad_field).unwrap_err();
        assert!(err.0.contains("line 3"), "{}", err.0);

        let bad_width = "unit_id,k,y,x1\n1,1,0.5\n";
        let err = parse_dataset(bad_width).unwrap_err();
        assert!(err.0.contains("line 2"), "{}", err.0);

        let bad_header = "id,k,y,x1\n";
        assert!(parse_dataset(bad_header).is_err());

        let missing = "unit_id,k,y,x1\n1,1,0.5,0.1\n1,2,0.5,0.1\n2,1,0.2,0.3\n";
        let err = parse_dataset(missing).unwrap_err();
        assert!(err.0.contains("not rectangular"), "{}", err.0);

        let dup = "unit_id,k,y,x1\n1,1,0.5,0.1\n1,1,0.7,0.2\n";
        let err = parse_dataset(dup).unwrap_err();
        assert!(err.0.contains("duplicate"), "{}", err.0);
    }
}

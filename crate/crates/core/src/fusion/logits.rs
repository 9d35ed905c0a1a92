use std::fmt::Display;
use std::io::{Read, Write};
use std::str::FromStr;

use num_traits::{Float, NumCast};

use super::{model_score, FusionError};
use crate::label::ClassLabel;

/// Header of a per-member logit dump.
pub const LOGIT_CSV_HEADER: [&str; 4] = ["record_id", "label", "logit_notinfected", "logit_infected"];

/// `batch × 2` logits of one model, columns `[notinfected, infected]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix<T> {
    pub model_id: String,
    pub values: Vec<[T; 2]>,
}

impl<T: Float> LogitMatrix<T> {
    pub fn new(model_id: impl Into<String>, values: Vec<[T; 2]>) -> Self {
        LogitMatrix {
            model_id: model_id.into(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scores(&self) -> Vec<T> {
        self.values.iter().map(|&z| model_score(z)).collect()
    }

    /// Solo prediction of this model; ties go to `notinfected`.
    pub fn argmax_labels(&self) -> Vec<ClassLabel> {
        self.values
            .iter()
            .map(|z| {
                if z[1] > z[0] {
                    ClassLabel::Infected
                } else {
                    ClassLabel::NotInfected
                }
            })
            .collect()
    }

    pub fn cast<U: Float>(&self) -> LogitMatrix<U> {
        let c = |v: T| <U as NumCast>::from(v).unwrap_or_else(U::nan);
        LogitMatrix {
            model_id: self.model_id.clone(),
            values: self.values.iter().map(|z| [c(z[0]), c(z[1])]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow<T> {
    pub record_id: String,
    pub label: ClassLabel,
    pub logits: [T; 2],
}

/// One member's logits over a split, with record ids and ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDump<T> {
    pub model_id: String,
    pub rows: Vec<LogitRow<T>>,
}

impl<T: Float + Display + FromStr> LogitDump<T> {
    pub fn matrix(&self) -> LogitMatrix<T> {
        LogitMatrix::new(self.model_id.clone(), self.rows.iter().map(|r| r.logits).collect())
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FusionError> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| FusionError::Dump(e.to_string());
        w.write_record(LOGIT_CSV_HEADER).map_err(err)?;
        for row in &self.rows {
            w.write_record([
                row.record_id.clone(),
                row.label.to_string(),
                row.logits[0].to_string(),
                row.logits[1].to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| FusionError::Dump(e.to_string()))
    }

    pub fn read_csv<R: Read>(model_id: impl Into<String>, reader: R) -> Result<Self, FusionError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| FusionError::Dump(e.to_string()))?;
        if header.iter().ne(LOGIT_CSV_HEADER) {
            return Err(FusionError::Dump(format!(
                "unexpected header {:?}, expected {}",
                header,
                LOGIT_CSV_HEADER.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(|e| FusionError::Dump(e.to_string()))?;
            let bad = |what: &str| FusionError::Dump(format!("row {}: bad {what}", line + 1));
            let number = |i: usize, what: &str| record[i].parse::<T>().map_err(|_| bad(what));
            rows.push(LogitRow {
                record_id: record[0].to_string(),
                label: record[1].parse().map_err(|_| bad("label"))?,
                logits: [number(2, "logit_notinfected")?, number(3, "logit_infected")?],
            });
        }
        Ok(LogitDump {
            model_id: model_id.into(),
            rows,
        })
    }
}

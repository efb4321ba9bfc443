use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const METRICS_HEADER: &str = "epoch,clean_acc,attack_train_acc,pgd_acc,ibp_cert_acc,ibp_loss,forwabs_gap,lr,eps_bound,wall_ms";

/// One row of the metrics CSV. `attack_train_acc` is NaN when the loss never
/// ran an attack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub clean_acc: f64,
    pub attack_train_acc: f64,
    pub pgd_acc: f64,
    pub ibp_cert_acc: f64,
    pub ibp_loss: f64,
    pub forwabs_gap: f64,
    pub lr: f64,
    pub eps_bound: f64,
    pub wall_ms: u64,
}

/// CSV text for `rows`. Wall-clock times are written as 0 unless
/// `wall_clock` is set, so that reruns produce identical bytes.
pub fn metrics_csv(rows: &[EpochMetrics], wall_clock: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        let r = EpochMetrics {
            wall_ms: if wall_clock { r.wall_ms } else { 0 },
            ..*r
        };
        w.serialize(r).map_err(csv_err)?;
    }
    let mut bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    if rows.is_empty() {
        bytes = format!("{METRICS_HEADER}\n").into_bytes();
    }
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<metrics>", io),
        other => Error::Domain {
            op: "metrics csv",
            detail: format!("{other:?}"),
        },
    }
}

/// Writes the metrics CSV atomically.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[EpochMetrics], wall_clock: bool) -> Result<()> {
    write_atomic(path.as_ref(), metrics_csv(rows, wall_clock)?.as_bytes())
}

/// Parses a metrics CSV produced by [`write_metrics_csv`].
pub fn read_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let first = text.lines().next().unwrap_or("");
    if first.trim() != METRICS_HEADER {
        return Err(Error::Domain {
            op: "metrics csv",
            detail: format!("unexpected header `{first}`"),
        });
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<EpochMetrics>, _>>()
        .map_err(csv_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> EpochMetrics {
        EpochMetrics {
            epoch,
            clean_acc: 0.5,
            attack_train_acc: f64::NAN,
            pgd_acc: 0.25,
            ibp_cert_acc: 0.0,
            ibp_loss: 1e20,
            forwabs_gap: 3.75,
            lr: 0.1,
            eps_bound: 0.3,
            wall_ms: 1234,
        }
    }

    #[test]
    fn header_and_round_trip() {
        let text = metrics_csv(&[row(1), row(2)], false).unwrap();
        assert!(text.starts_with(&format!("{METRICS_HEADER}\n")));
        assert_eq!(text.lines().count(), 3);
        let back = read_metrics_csv(&text).unwrap();
        assert_eq!(back[1].epoch, 2);
        assert_eq!(back[0].wall_ms, 0);
        assert!(back[0].attack_train_acc.is_nan());
        assert_eq!(back[0].ibp_loss, 1e20);
        assert_eq!(metrics_csv(&[], false).unwrap(), format!("{METRICS_HEADER}\n"));
    }
}

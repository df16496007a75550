//! Per-round metric rows and the tab-separated metrics log.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What one client reported for one round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientReport {
    pub client_id: String,
    pub n_k: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// One log row. Client means are unweighted; the global columns are only
/// present when the combiner evaluates on a held-out set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    pub t: u32,
    pub n_received: u32,
    pub mean_train_acc: f64,
    pub mean_val_acc: f64,
    pub mean_train_loss: f64,
    pub mean_val_loss: f64,
    pub global_val_acc: Option<f64>,
    pub global_val_loss: Option<f64>,
}

impl RoundMetrics {
    /// `None` for a round with no reports.
    pub fn from_reports(t: u32, reports: &[ClientReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let mean =
            |f: fn(&ClientReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        Some(RoundMetrics {
            t,
            n_received: reports.len() as u32,
            mean_train_acc: mean(|r| r.train_acc),
            mean_val_acc: mean(|r| r.val_acc),
            mean_train_loss: mean(|r| r.train_loss),
            mean_val_loss: mean(|r| r.val_loss),
            global_val_acc: None,
            global_val_loss: None,
        })
    }

    pub fn with_global(mut self, acc: f64, loss: f64) -> Self {
        self.global_val_acc = Some(acc);
        self.global_val_loss = Some(loss);
        self
    }

    /// Floats use Rust's shortest round-trip formatting, so parsing a line
    /// gives back the same bits.
    pub fn to_log_line(&self) -> String {
        let mut line = format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.t,
            self.n_received,
            self.mean_train_acc,
            self.mean_val_acc,
            self.mean_train_loss,
            self.mean_val_loss
        );
        if let (Some(acc), Some(loss)) = (self.global_val_acc, self.global_val_loss) {
            line.push_str(&format!("\t{acc}\t{loss}"));
        }
        line
    }

    pub fn parse_log_line(text: &str, line: usize) -> Result<Self, MetricsError> {
        let err = |reason: String| MetricsError::Parse { line, reason };
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 6 && fields.len() != 8 {
            return Err(err(format!("expected 6 or 8 fields, got {}", fields.len())));
        }
        let float = |i: usize| -> Result<f64, MetricsError> {
            fields[i]
                .parse()
                .map_err(|_| err(format!("bad number {:?}", fields[i])))
        };
        let int = |i: usize| -> Result<u32, MetricsError> {
            fields[i]
                .parse()
                .map_err(|_| err(format!("bad integer {:?}", fields[i])))
        };
        let (global_val_acc, global_val_loss) = if fields.len() == 8 {
            (Some(float(6)?), Some(float(7)?))
        } else {
            (None, None)
        };
        Ok(RoundMetrics {
            t: int(0)?,
            n_received: int(1)?,
            mean_train_acc: float(2)?,
            mean_val_acc: float(3)?,
            mean_train_loss: float(4)?,
            mean_val_loss: float(5)?,
            global_val_acc,
            global_val_loss,
        })
    }
}

pub fn append_log(path: impl AsRef<Path>, row: &RoundMetrics) -> Result<(), MetricsError> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(file, "{}", row.to_log_line())?;
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>, MetricsError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| RoundMetrics::parse_log_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(acc: f64) -> ClientReport {
        ClientReport {
            client_id: "c".into(),
            n_k: 1,
            train_loss: 1.0,
            train_acc: acc,
            val_loss: 2.0,
            val_acc: acc,
        }
    }

    #[test]
    fn mean_of_two_clients() {
        let m = RoundMetrics::from_reports(1, &[report(40.0), report(60.0)]).unwrap();
        assert_eq!(m.mean_train_acc, 50.0);
        assert_eq!(m.n_received, 2);
        assert!(RoundMetrics::from_reports(1, &[]).is_none());
    }

    #[test]
    fn log_line_round_trips_exactly() {
        let m = RoundMetrics::from_reports(3, &[report(1.0 / 3.0), report(0.1)]).unwrap();
        let back = RoundMetrics::parse_log_line(&m.to_log_line(), 1).unwrap();
        assert_eq!(back, m);
        let g = m.with_global(12.5, 0.7);
        assert_eq!(
            RoundMetrics::parse_log_line(&g.to_log_line(), 1).unwrap(),
            g
        );
        assert!(RoundMetrics::parse_log_line("1\t2", 4).is_err());
    }
}

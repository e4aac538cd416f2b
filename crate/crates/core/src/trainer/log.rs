use std::fmt::Write as _;
use std::io;
use std::path::Path;

/// Loss terms of one pass. `total` already carries the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reg: f64,
    pub phys: f64,
    pub kl: f64,
}

impl LossParts {
    pub(crate) fn add_scaled(&mut self, other: &LossParts, w: f64) {
        self.total += w * other.total;
        self.reg += w * other.reg;
        self.phys += w * other.phys;
        self.kl += w * other.kl;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val: LossParts,
    /// Share of training log-variance outputs inside the clamp's bend.
    pub clamp_active: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Plateau,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop: Option<StopReason>,
}

pub const LOG_COLUMNS: [&str; 12] = [
    "epoch",
    "lr",
    "train_total",
    "train_reg",
    "train_phys",
    "train_kl",
    "val_total",
    "val_reg",
    "val_phys",
    "val_kl",
    "clamp_active",
    "wall_seconds",
];

impl TrainLog {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            best_epoch: None,
            stop: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = LOG_COLUMNS.join(",");
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:.3}",
                r.epoch,
                r.lr,
                r.train.total,
                r.train.reg,
                r.train.phys,
                r.train.kl,
                r.val.total,
                r.val.reg,
                r.val.phys,
                r.val.kl,
                r.clamp_active,
                r.wall_seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

impl Default for TrainLog {
    fn default() -> Self {
        Self::new()
    }
}

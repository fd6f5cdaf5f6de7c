use std::fmt;

use crate::error::{Error, Result};

/// The three training stages. Backbone weights are trainable only in
/// [`TrainStage::Backbone`]; the adapter only in the other two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainStage {
    Backbone,
    AdapterPretrain,
    AdapterTrain,
}

impl TrainStage {
    pub fn name(self) -> &'static str {
        match self {
            TrainStage::Backbone => "backbone",
            TrainStage::AdapterPretrain => "adapter_pretrain",
            TrainStage::AdapterTrain => "adapter_train",
        }
    }

    pub fn trains_backbone(self) -> bool {
        self == TrainStage::Backbone
    }

    pub fn trains_adapter(self) -> bool {
        !self.trains_backbone()
    }

    /// Errors unless `self` is `expected`.
    pub fn require(self, expected: TrainStage) -> Result<()> {
        if self == expected {
            Ok(())
        } else {
            Err(Error::Stage(format!("{} step called in stage {}", expected.name(), self.name())))
        }
    }
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Step budget, batch size and learning-rate schedule of one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: TrainStage,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub final_frac: f64,
}

impl StagePlan {
    pub fn new(stage: TrainStage, steps: usize, batch: usize, lr: f64) -> Self {
        StagePlan {
            stage,
            steps,
            batch,
            lr,
            warmup: (steps / 20).min(500),
            final_frac: 0.1,
        }
    }

    /// Learning rate at `step` (0-based): linear warmup, then cosine decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let x = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * x).cos());
        self.lr * (self.final_frac + (1.0 - self.final_frac) * cos)
    }
}

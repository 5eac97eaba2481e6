/// One row of a training trajectory. `time` is the step index for discrete
/// optimizers and the flow time for gradient flow.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub time: f64,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    Cutoff,
    Cap,
    EarlyStop,
    Boundary,
    Divergence,
    Error,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Cutoff => "cutoff",
            StopReason::Cap => "cap",
            StopReason::EarlyStop => "early_stop",
            StopReason::Boundary => "boundary",
            StopReason::Divergence => "divergence",
            StopReason::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetadata {
    pub seed: u64,
    pub whitening: String,
    pub optimizer: String,
    pub dataset_size: usize,
    pub batch_order_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRecord {
    pub steps: Vec<StepMetrics>,
    pub steps_to_cutoff: Option<usize>,
    /// Index into `steps` of the lowest validation loss.
    pub best_step: Option<usize>,
    pub stopping_reason: Option<StopReason>,
    /// Message of the error that ended the run, if any.
    pub error: Option<String>,
    pub metadata: RunMetadata,
}

impl TrainRecord {
    /// Appends a row; step indices must strictly increase.
    pub fn push(&mut self, m: StepMetrics) {
        if let Some(last) = self.steps.last() {
            assert!(m.step > last.step, "step {} after {}", m.step, last.step);
        }
        self.steps.push(m);
    }

    pub fn finish(&mut self, reason: StopReason, best_step: Option<usize>) {
        self.stopping_reason = Some(reason);
        self.best_step = best_step.or_else(|| self.best_validation_index());
    }

    pub fn with_metadata(mut self, metadata: RunMetadata) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn last(&self) -> Option<&StepMetrics> {
        self.steps.last()
    }

    pub fn best_validation_index(&self) -> Option<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.val_loss.map(|v| (i, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    /// The row with the lowest validation loss.
    pub fn best(&self) -> Option<&StepMetrics> {
        self.best_step.and_then(|i| self.steps.get(i))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.train_loss).collect()
    }

    pub fn epochs_to_cutoff(&self, batch: usize, n: usize) -> Option<f64> {
        self.steps_to_cutoff.map(|s| s as f64 * batch.min(n) as f64 / n as f64)
    }
}

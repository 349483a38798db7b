use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::loss::{detections, Detection, OutputGrad};
use super::model::{collect_output, Detector, DetectorOutput};
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Tape};

/// Final-layer detections of `model` on `image` (see [`detections`]).
pub fn predict(model: &Detector, image: &ImageRecord, score_threshold: f64) -> Result<Vec<Detection>> {
    if !(score_threshold >= 0.0) {
        return Err(Error::Precondition(format!(
            "score threshold {score_threshold} must be non-negative"
        )));
    }
    Ok(detections(&model.forward(image)?, score_threshold))
}

/// Step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    /// Epochs between decays; `0` keeps the rate constant.
    pub step_epochs: usize,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-3,
            step_epochs: 20,
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.step_epochs == 0 {
            return self.base;
        }
        self.base * self.gamma.powi((epoch / self.step_epochs) as i32)
    }
}

/// Optimizer state bound to one model's parameter layout.
#[derive(Clone, Debug)]
pub struct Trainer {
    adam: Adam,
    steps: u64,
}

impl Trainer {
    pub fn new(cfg: AdamConfig, model: &Detector) -> Self {
        Self {
            adam: Adam::new(cfg, model.params()),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One optimizer step on the batch mean of per-sample losses.
    ///
    /// `loss_fn(i, out)` returns sample `i`'s loss and its gradient with
    /// respect to the detector outputs.
    pub fn train_step<F>(
        &mut self,
        model: &mut Detector,
        batch: &[&ImageRecord],
        lr: f64,
        mut loss_fn: F,
    ) -> Result<f64>
    where
        F: FnMut(usize, &DetectorOutput) -> Result<(f64, OutputGrad)>,
    {
        if batch.is_empty() {
            return Err(Error::Precondition("empty training batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; model.params().len()];
        for (i, image) in batch.iter().enumerate() {
            let mut tape = Tape::new(model.params());
            let vars = model.forward_tape(&mut tape, image)?;
            let out = collect_output(&tape, &vars);
            let (loss, g) = loss_fn(i, &out)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} on image {} at step {}",
                    image.image_id(),
                    self.steps
                )));
            }
            total += loss * scale;
            let mut seeds = Vec::with_capacity(2 * vars.logits.len());
            for l in 0..vars.logits.len() {
                let gl = g.logits.index_axis(Axis(0), l);
                let gb = g.boxes.index_axis(Axis(0), l);
                if gl.iter().any(|v| *v != 0.0) {
                    seeds.push((vars.logits[l], gl.mapv(|v| v * scale)));
                }
                if gb.iter().any(|v| *v != 0.0) {
                    seeds.push((vars.boxes[l], gb.mapv(|v| v * scale)));
                }
            }
            if seeds.is_empty() {
                continue;
            }
            for (acc, g) in grads.iter_mut().zip(tape.backward(seeds)) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => *a += &g,
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "non-finite gradient at step {}",
                self.steps
            )));
        }
        if lr > 0.0 {
            self.adam.step(model.params_mut(), &grads, lr);
        }
        self.steps += 1;
        Ok(total)
    }
}

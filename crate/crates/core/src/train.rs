//! AdamW with linear learning-rate warm-up.

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use candle_core::Var;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub peak: f64,
    pub warmup_iters: usize,
}

impl WarmupSchedule {
    /// Rate used for the `iter`-th optimizer step (1-based); reaches `peak`
    /// at `iter == warmup_iters` and stays there.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.warmup_iters == 0 {
            return self.peak;
        }
        self.peak * (iter as f64 / self.warmup_iters as f64).min(1.0)
    }
}

pub struct Trainer {
    opt: AdamW,
    schedule: WarmupSchedule,
    iter: usize,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, schedule: WarmupSchedule, weight_decay: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr: schedule.lr_at(1),
            weight_decay,
            ..Default::default()
        };
        Ok(Trainer {
            opt: AdamW::new(vars, params)?,
            schedule,
            iter: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.learning_rate()
    }

    /// Backpropagates `loss` and applies one update; non-finite losses abort.
    pub fn step(&mut self, loss: &Tensor, context: &str) -> Result<f32> {
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{context}: loss is {value} at iteration {}",
                self.iter + 1
            )));
        }
        self.iter += 1;
        self.opt.set_learning_rate(self.schedule.lr_at(self.iter));
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_warmup_reaches_peak() {
        let s = WarmupSchedule {
            peak: 2e-4,
            warmup_iters: 250,
        };
        assert_eq!(s.lr_at(250), 2e-4);
        assert_eq!(s.lr_at(1000), 2e-4);
        assert!((s.lr_at(125) - 1e-4).abs() < 1e-15);
        let t = WarmupSchedule {
            peak: 2e-4,
            warmup_iters: 20,
        };
        assert_eq!(t.lr_at(20), 2e-4);
        assert!(t.lr_at(19) < 2e-4);
    }
}

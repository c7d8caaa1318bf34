//! Adversarial training with counterfactual domain confusion.
//!
//! The representation is trained to predict outcomes while confusing a
//! treatment classifier, whose own update runs against an exponential moving
//! average of the representation.

mod fit;
mod losses;
mod optim;
mod step;
pub mod theory;

pub use fit::{
    alpha_schedule, augment_minibatch, augment_with, factual_rmse, train, train_from, EpochRecord,
    TrainConfig, TrainResult,
};
pub use losses::{loss_conf, loss_factual, loss_ga, PROB_FLOOR};
pub use optim::{ema_update, GradMap, Optimizer, OptimizerKind};
pub use step::{
    adversarial_step, AdversarialObjective, Balancing, CtObjective, StepConfig, StepLosses,
    TrainState,
};
pub use theory::{lemma1_oracle, theorem1_objective};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_schedule_shape() {
        assert_eq!(alpha_schedule(0, 50, 0.01), 0.0);
        let end = alpha_schedule(50, 50, 0.01);
        assert!((end - 0.01 * (2.0 / (1.0 + (-10f64).exp()) - 1.0)).abs() < 1e-18);
        assert!((end - 0.0099991).abs() < 1e-7);
        assert!((end - 0.01 * 5f64.tanh()).abs() < 1e-15);
        let vals: Vec<f64> = (0..=50).map(|e| alpha_schedule(e, 50, 0.01)).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }
}

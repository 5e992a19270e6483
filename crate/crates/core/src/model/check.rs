use super::config::ModelConfig;
use super::loss::{combined_loss, LossConfig};
use super::network::SegModel;
use crate::error::Result;
use crate::tensor::{gradcheck_resampling, GradcheckOptions, GradcheckReport, RngState, Tape, Tensor, Var};

/// Finite-difference check of the whole model in double precision: input
/// first, then every trainable tensor in store order. Dropout must be zero
/// for the loss to be a deterministic function of the inputs.
pub fn gradcheck_model(cfg: &ModelConfig, seed: u64, opts: &GradcheckOptions, attempts: usize) -> Result<GradcheckReport> {
    let mut model = SegModel::<f64>::new(ModelConfig { dropout: 0.0, ..cfg.clone() }, seed)?;
    let params: Vec<Tensor<f64>> = model.store.trainable_ids().map(|id| model.store.get(id).clone()).collect();
    let (c, h, w) = (cfg.in_channels, cfg.height, cfg.width);
    let mut target_rng = RngState::new(seed ^ 0x7461_7267);
    let target: Vec<u8> = (0..2 * h * w).map(|_| (target_rng.next_f64() * cfg.classes as f64) as u8).collect();
    let loss_cfg = LossConfig::default();
    gradcheck_resampling(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let b = model.store.binding_from(&v[1..])?;
            let out = model.forward(tape, &b, v[0], true, &mut RngState::new(0))?;
            combined_loss(tape, out.logits, &target, &loss_cfg)
        },
        |s| {
            let mut rng = RngState::new(s);
            let mut inputs = vec![Tensor::from_fn(&[2, c, h, w], |_| rng.next_f64() * 2.0 - 1.0)];
            inputs.extend(params.iter().cloned());
            inputs
        },
        opts,
        attempts,
    )
}

/// Store name of gradcheck input `index` as laid out by [`gradcheck_model`].
pub fn gradcheck_input_name(model: &SegModel<f64>, index: usize) -> String {
    match index {
        0 => "input".into(),
        i => model.store.trainable_ids().nth(i - 1).map(|id| model.store.name(id).to_string()).unwrap_or_default(),
    }
}

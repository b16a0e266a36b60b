use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bag::{Bag, Instance};
use super::network::{aux_loss, main_loss, EncoderConfig, MilModel};
use crate::autodiff::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::error::Result;

/// Weight on the aux loss in the checked scalar, so both heads contribute
/// with distinguishable scale.
const AUX_MIX: f64 = 0.7;

/// Finite-difference check of the whole network on one random bag.
///
/// Pixels are continuous and every bias is randomised, so no ReLU sits
/// exactly on its kink and no pooling window has tied inputs. The checked
/// scalar is `main_loss + 0.7 * aux_loss`.
pub fn network_gradcheck(
    config: EncoderConfig,
    instances: usize,
    seed: u64,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut model = MilModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let bias_ids: Vec<_> = model
        .params()
        .iter()
        .filter(|(_, p)| p.name.ends_with("bias"))
        .map(|(id, _)| id)
        .collect();
    for id in bias_ids {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let (h, w) = (config.input_height, config.input_width);
    let insts = (0..instances)
        .map(|_| Instance::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let aux_labels = (0..instances)
        .map(|_| rng.gen_range(0..config.aux_classes))
        .collect();
    let bag = Bag::new(0, insts, rng.gen_range(0..config.main_classes), aux_labels)?;

    finite_diff_check(
        |g, ps| {
            let p = model.bind_with(g, ps);
            let nodes = model.forward(g, &p, &bag)?;
            let lm = main_loss(g, nodes.main_logits, bag.label)?;
            let la = aux_loss(g, nodes.aux_logits, &bag.aux_labels)?;
            let la = g.scale(la, AUX_MIX)?;
            g.add(lm, la)
        },
        model.params(),
        tolerance,
        opts,
    )
}

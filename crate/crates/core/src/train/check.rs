use super::meta::iteration_graph_on;
use super::{Method, TrainConfig};
use crate::data::{build_auxiliary, generate_dataset, DomainSpec};
use crate::error::Result;
use crate::model::{FslHead, Graph, ModelBundle, ModelConfig};
use crate::tensor::{finite_diff_check, GradCheckOptions};

/// Worst relative error between the tape gradient of the full meta-training
/// objective and central differences, over a 2-way 1-shot micro-batch with
/// two queries per class. Every parameter tensor of all five sets is an
/// input; `coords_per_tensor` coordinates of each are probed.
pub fn check_total_loss(head: FslHead, lambda: f64, coords_per_tensor: usize, seed: u64) -> Result<f64> {
    let image_size = 16;
    let source = generate_dataset(
        &DomainSpec {
            image_size,
            ..DomainSpec::source()
        },
        3,
        4,
        seed,
    )?;
    let target = generate_dataset(
        &DomainSpec {
            image_size,
            ..DomainSpec::target()
        },
        3,
        4,
        seed,
    )?;
    let aux = build_auxiliary(&target, 3, seed)?;
    let cfg = TrainConfig {
        method: Method::MetaFdMixup,
        n_way: 2,
        k_shot: 1,
        m_query: 2,
        fixed_lambda: Some(lambda),
        head,
        seed,
        ..TrainConfig::default()
    };
    let model = ModelBundle::new(
        ModelConfig {
            image_size,
            channels: [2, 2, 3, 3],
            num_classes: 3,
            head,
            ..ModelConfig::default()
        },
        seed,
    )?;
    let point = model.param_tensors();
    let program = |tape: &mut crate::tensor::Tape, vars: &[crate::tensor::Var]| {
        let g = Graph::with_params(&model, std::mem::take(tape), vars)?;
        let (g, loss, _) = iteration_graph_on(g, &cfg, &source, Some(&aux), 0)?;
        *tape = g.into_tape();
        Ok(loss)
    };
    finite_diff_check(
        program,
        &point,
        &GradCheckOptions {
            eps: 1e-6,
            max_coords_per_input: Some(coords_per_tensor),
            seed,
        },
    )
}

//! Finite-difference verification of every composite loss in the game.
//!
//! Each case rebuilds its loss over the checked player's parameters with the
//! other players frozen, and compares reverse-mode gradients against central
//! finite differences coordinate by coordinate. Stochastic layers draw from
//! streams reseeded per evaluation, so every rebuild sees identical noise.

use crate::data::class_prior_sample;
use crate::error::Result;
use crate::game::{
    classifier_loss_nodes, disc_loss_node, gen_loss_node, ClassifierBatches,
    ClassifierLossWeights, GenLossVariant, PairBatch, RegularizerKind,
};
use crate::gradcheck::grad_check;
use crate::networks::{sample_latent, TripleGanModel};
use crate::rng::{derive_seed, streams, RngStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_err: f64,
}

/// Run the full suite against a model. Batch sizes stay small; the check
/// cost scales with parameter count times evaluations.
pub fn composite_loss_suite(
    model: &TripleGanModel,
    batch: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradCheckCase>> {
    let k = model.num_classes();
    let d = model.data_dim();
    let latent = model.generator.latent_dim;
    let mut data_rng = RngStream::new(derive_seed(seed, 1), streams::DATA_GEN);

    let mk_pairs = |rng: &mut RngStream| PairBatch {
        x: Tensor::randn(&[batch, d], 0.5, rng),
        y: (0..batch).map(|i| i % k).collect(),
    };
    let positives = mk_pairs(&mut data_rng);
    let cls_pairs = mk_pairs(&mut data_rng);
    let gen_pairs = mk_pairs(&mut data_rng);
    let unlabeled = Tensor::randn(&[batch, d], 0.5, &mut data_rng);
    let labeled = mk_pairs(&mut data_rng);
    let generated = mk_pairs(&mut data_rng);
    let alpha = 0.5;

    let mut cases = Vec::new();

    // discriminator loss over theta_d
    {
        let d_params: Vec<Tensor> = model.discriminator.flat().into_iter().cloned().collect();
        let builder = |g: &mut crate::graph::Graph, params: &[crate::graph::NodeId]| {
            disc_loss_node(g, model, params, &positives, &cls_pairs, &gen_pairs, alpha)
        };
        cases.push(GradCheckCase {
            name: "discriminator_loss".into(),
            max_rel_err: grad_check(&builder, &d_params, h)?,
        });
    }

    // classifier loss over theta_c, one case per unlabeled regularizer
    let c_params: Vec<Tensor> = model.classifier.flat().into_iter().cloned().collect();
    for (reg, name) in [
        (RegularizerKind::None, "classifier_loss/none"),
        (RegularizerKind::Entropy, "classifier_loss/entropy"),
        (RegularizerKind::Consistency, "classifier_loss/consistency"),
        (RegularizerKind::MeanTeacher, "classifier_loss/mean_teacher"),
    ] {
        let weights = ClassifierLossWeights {
            alpha,
            alpha_p_eff: 0.3,
            alpha_u_eff: if reg == RegularizerKind::None { 0.0 } else { 1.0 },
            include_adv: true,
            regularizer: reg,
        };
        let noise_seed = derive_seed(seed, 2);
        let (unlabeled, labeled, generated) =
            (unlabeled.clone(), labeled.clone(), generated.clone());
        let builder = move |g: &mut crate::graph::Graph, params: &[crate::graph::NodeId]| {
            let batches = ClassifierBatches {
                unlabeled_x: &unlabeled,
                labeled: &labeled,
                generated: Some(&generated),
            };
            let mut rng = RngStream::new(noise_seed, streams::INPUT_NOISE);
            classifier_loss_nodes(g, model, params, &batches, &weights, &mut rng)
                .map(|nodes| nodes.total)
        };
        cases.push(GradCheckCase {
            name: name.into(),
            max_rel_err: grad_check(&builder, &c_params, h)?,
        });
    }

    // generator loss over theta_g, both variants
    let g_params: Vec<Tensor> = model.generator.flat().into_iter().cloned().collect();
    let mut y_rng = RngStream::new(derive_seed(seed, 3), streams::CLASS_PRIOR);
    let y_g = class_prior_sample(k, batch, &mut y_rng);
    let mut z_rng = RngStream::new(derive_seed(seed, 4), streams::LATENT);
    let z = sample_latent(batch, latent, &mut z_rng);
    for (variant, name) in [
        (GenLossVariant::Minimax, "generator_loss/minimax"),
        (GenLossVariant::NonSaturating, "generator_loss/nonsaturating"),
    ] {
        let y_g = y_g.clone();
        let z = z.clone();
        let builder = move |g: &mut crate::graph::Graph, params: &[crate::graph::NodeId]| {
            gen_loss_node(g, model, params, &y_g, &z, alpha, variant)
        };
        cases.push(GradCheckCase {
            name: name.into(),
            max_rel_err: grad_check(&builder, &g_params, h)?,
        });
    }

    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{
        ClassifierParams, DiscVariant, DiscriminatorParams, GeneratorParams, TeacherParams,
    };
    use crate::tensor::DType;

    fn tiny_model(seed: u64, variant: DiscVariant) -> TripleGanModel {
        let mut rng = RngStream::new(seed, streams::INIT);
        let classifier = ClassifierParams::init(&[2, 12, 12, 4], 0.1, 0.3, &mut rng);
        let generator = GeneratorParams::init(4, 3, &[12, 12], 2, &mut rng);
        let discriminator = DiscriminatorParams::init(variant, 2, 4, &[12, 6], &mut rng);
        let teacher = {
            // a teacher that differs from the student so the consistency
            // target is nontrivial
            let mut t = ClassifierParams::init(&[2, 12, 12, 4], 0.1, 0.3, &mut rng);
            t.input_noise = classifier.input_noise;
            t.dropout = classifier.dropout;
            TeacherParams {
                classifier: t,
                decay: 0.99,
            }
        };
        TripleGanModel {
            classifier,
            generator,
            discriminator,
            teacher,
            dtype: DType::F64,
        }
    }

    #[test]
    fn all_composite_losses_pass_fd_checks() {
        for variant in [DiscVariant::Projection, DiscVariant::Concat] {
            let model = tiny_model(3, variant);
            let cases = composite_loss_suite(&model, 3, 1e-5, 17).unwrap();
            assert_eq!(cases.len(), 7);
            for case in cases {
                assert!(
                    case.max_rel_err < 1e-4,
                    "{} ({:?}): max rel err {}",
                    case.name,
                    variant,
                    case.max_rel_err
                );
            }
        }
    }
}

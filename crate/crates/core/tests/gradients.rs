//! Analytic gradients of every training loss against central finite
//! differences, in f64 on micro configurations.

mod common;

use common::*;
use ross::autograd::gradcheck::{check_params, numeric_gradient, relative_error, GradCheckReport};
use ross::autograd::{Graph, ParamStore, Tensor};
use ross::diffusion::denoising_loss;
use ross::image::Image;
use ross::mmlm::MultimodalLm;
use ross::objectives::{ObjectiveKind, VisualObjective};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn assert_report(label: &str, report: &GradCheckReport) {
    assert!(!report.tensors.is_empty(), "{label}: nothing checked");
    for t in &report.tensors {
        assert!(t.rel_error <= TOL, "{label}: {} rel error {:.3e}", t.name, t.rel_error);
    }
}

struct Setup {
    images: Vec<Image>,
    model: MultimodalLm<f64>,
    objective: VisualObjective<f64>,
}

fn setup(kind: ObjectiveKind, self_attention: bool) -> Setup {
    let images = random_images(2, 8, 21);
    let refs: Vec<&Image> = images.iter().collect();
    let cfg = micro_model();
    Setup {
        model: MultimodalLm::new(cfg, 4).unwrap(),
        objective: micro_objective(kind, &cfg, &refs, self_attention),
        images,
    }
}

/// Checks all three parameter groups of a variant.
fn check_variant(kind: ObjectiveKind) {
    let s = setup(kind, true);
    let refs: Vec<&Image> = s.images.iter().collect();
    let text = micro_text(refs.len());
    let label = kind.name();

    let report = check_params(&s.model.store, H, |store: &ParamStore<f64>, g: &mut Graph<f64>| {
        let mut m = s.model.clone();
        m.store = store.replica();
        full_loss(g, &m, &s.objective, &refs, &text)
    })
    .unwrap();
    assert_report(&format!("{label} lmm"), &report);

    if !s.objective.store.is_empty() {
        let report = check_params(&s.objective.store, H, |store: &ParamStore<f64>, g: &mut Graph<f64>| {
            let mut o = s.objective.clone();
            o.store = store.replica();
            full_loss(g, &s.model, &o, &refs, &text)
        })
        .unwrap();
        assert_report(&format!("{label} head"), &report);
    }

    if let Some(d) = &s.objective.denoiser {
        let report = check_params(&d.store, H, |store: &ParamStore<f64>, g: &mut Graph<f64>| {
            let mut o = s.objective.clone();
            o.denoiser.as_mut().unwrap().store = store.replica();
            full_loss(g, &s.model, &o, &refs, &text)
        })
        .unwrap();
        assert_report(&format!("{label} denoiser"), &report);
    }
}

#[test]
fn text_loss_gradients() {
    check_variant(ObjectiveKind::None);
}

#[test]
fn r_pixel_gradients() {
    check_variant(ObjectiveKind::RPixel);
}

#[test]
fn r_latent_gradients() {
    check_variant(ObjectiveKind::RLatent);
}

#[test]
fn r_latent2pixel_gradients() {
    check_variant(ObjectiveKind::RLatent2pixel);
}

#[test]
fn d_latent_gradients() {
    check_variant(ObjectiveKind::DLatent);
}

#[test]
fn d_pixel_gradients() {
    check_variant(ObjectiveKind::DPixel);
}

#[test]
fn generative_gradients() {
    check_variant(ObjectiveKind::Generative);
}

/// The denoising loss differentiated w.r.t. the condition tensor itself,
/// with and without token mixing.
#[test]
fn denoising_loss_condition_gradient() {
    for self_attention in [false, true] {
        let s = setup(ObjectiveKind::DLatent, self_attention);
        let refs: Vec<&Image> = s.images.iter().collect();
        let z0 = s.objective.diffusion_targets(&refs).unwrap();
        let den = s.objective.denoiser.as_ref().unwrap();
        let schedule = s.objective.schedule.as_ref().unwrap();
        let cond = Tensor::<f64>::randn(&[2, 4, 8], 1.0, &mut rng(8));

        let loss_at = |c: &Tensor<f64>| -> ross::Result<f64> {
            let mut g = Graph::new();
            let cv = g.constant(c.clone());
            let (l, _) = denoising_loss(&mut g, den, &z0, cv, schedule, &mut rng(3))?;
            Ok(g.value(l).item())
        };
        let mut g = Graph::new();
        let cv = g.input(cond.clone());
        let (l, _) = denoising_loss(&mut g, den, &z0, cv, schedule, &mut rng(3)).unwrap();
        let grads = g.backward(l).unwrap();
        let analytic = grads.of(cv).unwrap().clone();
        let numeric = numeric_gradient(&cond, H, loss_at).unwrap();
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOL, "self_attention={self_attention}: rel error {err:.3e}");
        assert!(numeric.data().iter().any(|&x| x != 0.0));
    }
}

//! Training loop: baseline recoverability, determinism, resume and
//! checkpoint round trips.

use ross::config::TrainConfig;
use ross::objectives::ObjectiveKind;
use ross::synthdata::{Dataset, DatasetSizes, Split};
use ross::tokenizers::TokenizerKind;
use ross::trainer::{read_metrics, StepMetrics, Trainer};

fn data() -> Dataset {
    Dataset::generate(
        3,
        DatasetSizes {
            train: 256,
            val: 32,
            test: 32,
        },
    )
}

/// Small and fast: 16 visual tokens, frozen-feature teacher.
fn small(kind: ObjectiveKind, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.d_model = 16;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.encoder_layers = 1;
    c.model.patch_size = 8;
    c.tokenizer.ae.patch = 8;
    c.denoiser.d_model = 16;
    c.denoiser.n_blocks = 1;
    c.denoiser.timestep_embed_dim = 16;
    c.objective.kind = kind;
    c.objective.tokenizer = TokenizerKind::FrozenFeature;
    c.tokenizer.fit_images = 64;
    c.train.batch_size = 16;
    c.train.epochs = 0;
    c.train.max_steps = Some(steps);
    c.optimizer.lr = 1e-3;
    c
}

fn train(config: TrainConfig, data: &Dataset) -> (Trainer<f32>, Vec<StepMetrics>) {
    let mut t = Trainer::<f32>::new(config, data.split(Split::Train), None).unwrap();
    let mut log = Vec::new();
    while t.step < t.total_steps {
        log.push(t.train_step(data.split(Split::Train)).unwrap());
    }
    (t, log)
}

fn bits(t: &Trainer<f32>) -> Vec<u32> {
    t.model
        .store
        .iter()
        .flat_map(|(_, _, v)| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn zero_lambda_recovers_the_baseline_bitwise() {
    let d = data();
    let (base, base_log) = train(small(ObjectiveKind::None, 200), &d);
    let mut c = small(ObjectiveKind::DLatent, 200);
    c.objective.lambda_visual = 0.0;
    let (ross, ross_log) = train(c, &d);
    assert!(bits(&base) == bits(&ross), "parameters differ");
    for (a, b) in base_log.iter().zip(&ross_log) {
        assert_eq!(a.text_loss.to_bits(), b.text_loss.to_bits(), "step {}", a.step);
        assert!(b.visual_loss.is_some());
    }
}

#[test]
fn identical_configs_give_identical_logs() {
    let d = data();
    let (_, a) = train(small(ObjectiveKind::DLatent, 30), &d);
    let (_, b) = train(small(ObjectiveKind::DLatent, 30), &d);
    let strip = |m: &StepMetrics| StepMetrics { wall_ms: 0.0, ..m.clone() };
    assert!(a.iter().map(strip).eq(b.iter().map(strip)));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(ObjectiveKind::DLatent, 40);
    c.train.eval_every = 20;

    let full = dir.path().join("full");
    let mut t = Trainer::<f32>::new(c.clone(), d.split(Split::Train), None).unwrap();
    let done = t.run(&d, &full).unwrap();

    let part = dir.path().join("part");
    std::fs::create_dir_all(&part).unwrap();
    let mid = Trainer::<f32>::load(&full.join("ckpt/step_000020.rsc")).unwrap();
    assert_eq!(mid.step, 20);
    let mut resumed = mid;
    let again = resumed.run(&d, &part).unwrap();

    assert_eq!(done.val, again.val);
    assert!(bits(&t) == bits(&resumed));
    let tail: Vec<_> = read_metrics(&full.join("metrics.jsonl")).unwrap().into_iter().skip(20).collect();
    let redo = read_metrics(&part.join("metrics.jsonl")).unwrap();
    assert_eq!(tail.len(), redo.len());
    for (a, b) in tail.iter().zip(&redo) {
        assert_eq!((a.step, a.text_loss, a.visual_loss, a.grad_norm), (b.step, b.text_loss, b.visual_loss, b.grad_norm));
    }
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    for kind in [ObjectiveKind::None, ObjectiveKind::DLatent, ObjectiveKind::RLatent] {
        let (t, _) = train(small(kind, 10), &d);
        let path = dir.path().join(format!("{kind}.rsc"));
        t.save(&path).unwrap();
        let back = Trainer::<f32>::load(&path).unwrap();
        let val = d.split(Split::Val);
        assert_eq!(t.evaluate(val, "val").unwrap(), back.evaluate(val, "val").unwrap(), "{kind}");
        assert_eq!(back.config, t.config);
    }
}

#[test]
fn fifty_steps_on_defaults_reduce_text_loss() {
    let d = data();
    let mut c = TrainConfig::default();
    c.train.epochs = 0;
    c.train.max_steps = Some(50);
    let (_, log) = train(c, &d);
    let first = log[0].text_loss;
    let last = log.last().unwrap().text_loss;
    assert!(last < first, "{last} vs step-0 {first}");
}

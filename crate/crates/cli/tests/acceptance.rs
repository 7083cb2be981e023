//! Acceptance gate for the workspace: one test per release criterion, each
//! printing an `ACCEPTANCE C<n> PASS` line on success (visible under
//! `cargo test -p gandl-cli --test acceptance -- --nocapture`).
//!
//! The numeric oracles here are written independently of the library's own
//! unit tests: the gradient checks rebuild every loss from scratch around
//! central finite differences, and the convolution checks compare against
//! plain gather loops that share no code with the tensor module.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use gandl_cli::commands::pipeline::{run_pipeline, PipelineOutcome};
use gandl_cli::config::{ClassifierSection, FixtureSection, GanSection, RunConfig};
use gandl_cli::tables;
use gandl_core::augment::{generate_synthetic, merge_datasets, plan_augmentation};
use gandl_core::data::checkpoint::{load_checkpoint, save_checkpoint};
use gandl_core::data::image_io::save_grayscale_png;
use gandl_core::data::{
    split_dataset, synth_fixture_dataset, Dataset, FixtureKind, ImageRecord, Provenance,
    SplitOrder, SplitSpec,
};
use gandl_core::metrics::metrics_report;
use gandl_core::models::{
    build_backbone, build_discriminator, build_generator, BackboneKind, LayerAudit, ModelGraph,
};
use gandl_core::rng;
use gandl_core::tensor::tape::{Tape, Val};
use gandl_core::tensor::{ops, Element, Tensor};
use gandl_core::training::{train_gan, GanTrainConfig, OptimizerConfig, TrainRow};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

// ---------------------------------------------------------------------------
// C1 — the published result tables derive from their confusion matrices.
// ---------------------------------------------------------------------------

#[test]
fn c1_published_tables_derive_from_their_confusion_matrices() {
    let start = Instant::now();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/published_confusion_matrices.json");
    let matrices = tables::parse_matrices_file(&fixture).expect("fixture parses");
    let check = tables::verify_tables(&matrices).expect("verification runs");

    assert_eq!(check.cells.len(), 24, "4 models × 6 table cells");
    assert_eq!(
        check.mismatched(),
        0,
        "every cell must match its published or derivable value:\n{}",
        check.report
    );
    assert_eq!(check.matched(), 21, "report:\n{}", check.report);

    // The three cells that cannot be derived from any matrix are flagged,
    // never silently matched — and they are exactly the known trio.
    let flagged: Vec<(&str, &str)> = check
        .cells
        .iter()
        .filter(|c| c.status == tables::CellStatus::KnownAnomaly)
        .map(|c| (c.model, c.name.as_str()))
        .collect();
    assert_eq!(
        flagged,
        [
            ("squeezenet_mini", "total accuracy"),
            ("squeezenet_mini", "summary precision"),
            ("googlenet_mini", "total accuracy"),
        ]
    );

    // Spot-check the summary rows straight from the metrics module, under
    // the documented alias (the source tables' "Precision" column is our
    // macro recall and vice versa). SqueezeNet's summary precision is the
    // one cell whose published value (93.60) no matrix reproduces; its own
    // published F1 of 94.46 is consistent only with 93.08, so that is the
    // value verified here.
    let rows = [
        ("alexnet_mini", 96.52, 95.37, 95.94),
        ("squeezenet_mini", 93.08, 95.88, 94.46),
        ("googlenet_mini", 98.63, 98.31, 98.47),
        ("resnet18_mini", 98.97, 98.97, 98.97),
    ];
    for (model, precision, recall, f1) in rows {
        let report = metrics_report(&matrices[model]).expect("metrics compute");
        let computed =
            [report.paper_precision() * 100.0, report.paper_recall() * 100.0, report.f1 * 100.0];
        for (got, want) in computed.into_iter().zip([precision, recall, f1]) {
            assert!(
                (got - want).abs() <= tables::TOLERANCE_PP,
                "{model}: computed {got:.2} vs published {want:.2}"
            );
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!(
        "ACCEPTANCE C1 PASS (24 cells: 21 matched, 3 known anomalies flagged, {elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// C2 — ×10 augmentation of a 624-image set: 6,240 merged, 4,992/1,248 split.
// ---------------------------------------------------------------------------

#[test]
fn c2_tenfold_augmentation_of_624_images_splits_4992_to_1248() {
    let start = Instant::now();
    let image_size = 8;
    // 234 + 390 is the composition whose stratified ×10 expansion lands
    // exactly on the published test margins (468 Normal / 780 Pneumonia).
    let mut data = Dataset::new(image_size);
    for i in 0..234 {
        let record =
            ImageRecord::new(format!("normal_{i:03}"), vec![0.25; 64], 0, Provenance::Real, 8)
                .expect("valid record");
        data.records.push(record);
    }
    for i in 0..390 {
        let record =
            ImageRecord::new(format!("pneumonia_{i:03}"), vec![0.75; 64], 1, Provenance::Real, 8)
                .expect("valid record");
        data.records.push(record);
    }
    assert_eq!(data.len(), 624);

    // Untrained generators are enough: the arithmetic under test does not
    // depend on image content.
    let mut plan = plan_augmentation::<f32>(&data, 10, 7).expect("plan");
    for class in [0u8, 1] {
        let generator =
            build_generator::<f32>(4, 4, image_size, u64::from(class)).expect("generator");
        plan.attach_generator(class, generator).expect("attach");
    }
    let synthetic = generate_synthetic(&plan).expect("generate");
    assert_eq!(synthetic.len(), 624 * 9, "multiplier 10 adds 9× synthetic");

    let merged = merge_datasets(&data, &synthetic).expect("merge");
    assert_eq!(merged.len(), 6240);

    let spec = SplitSpec {
        train_fraction: 0.8,
        stratified: true,
        seed: 7,
        order: SplitOrder::SplitAfterAugment,
    };
    let (train, test) = split_dataset(&merged, &spec).expect("split");
    assert_eq!((train.len(), test.len()), (4992, 1248));

    let train_counts = train.class_counts();
    let test_counts = test.class_counts();
    assert_eq!((train_counts[&0], train_counts[&1]), (1872, 3120));
    assert_eq!((test_counts[&0], test_counts[&1]), (468, 780), "published test margins");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!("ACCEPTANCE C2 PASS (624 → 6240 merged → 4992 train / 1248 test, {elapsed:.1?})");
}

// ---------------------------------------------------------------------------
// C3 — every differentiable op passes central finite-difference checks.
// ---------------------------------------------------------------------------

#[test]
fn c3_all_differentiable_ops_pass_finite_difference_checks() {
    let start = Instant::now();
    let cases = 50;
    let (ops_f64, checked_f64) = grad_check_suite::<f64>(1e-4, 1e-5, cases);
    let (ops_f32, checked_f32) = grad_check_suite::<f32>(1e-2, 5e-3, cases);
    assert_eq!(ops_f64, ops_f32);

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "ACCEPTANCE C3 PASS ({ops_f64} ops × {cases} cases, f64 ≤ 1e-4 ({checked_f64} partials) \
         and f32 ≤ 1e-2 ({checked_f32} partials), {elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// C4 — convolutions match a direct-loop oracle and the adjoint identity.
// ---------------------------------------------------------------------------

#[test]
fn c4_convolutions_match_direct_loops_and_adjoint_identity() {
    let start = Instant::now();

    // Exhaustive small shapes, library f32 against the f64 gather loops.
    let mut shapes = 0usize;
    let mut max_conv_err = 0f64;
    let mut max_tconv_err = 0f64;
    for n in [1usize, 2] {
        for ci in [1usize, 3] {
            for co in [1usize, 2] {
                for h in 1..=4usize {
                    for w in 1..=4usize {
                        for k in 1..=3usize {
                            for stride in [1usize, 2] {
                                for pad in [0usize, 1] {
                                    let with_bias = (h + w + k) % 2 == 0;
                                    if h + 2 * pad >= k && w + 2 * pad >= k {
                                        max_conv_err = max_conv_err.max(compare_conv(
                                            n, ci, co, h, w, k, stride, pad, with_bias,
                                        ));
                                        shapes += 1;
                                    }
                                    if (h - 1) * stride + k > 2 * pad
                                        && (w - 1) * stride + k > 2 * pad
                                    {
                                        max_tconv_err = max_tconv_err.max(compare_tconv(
                                            n, ci, co, h, w, k, stride, pad, with_bias,
                                        ));
                                        shapes += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(max_conv_err <= 1e-5, "conv2d max abs error {max_conv_err:.2e}");
    assert!(max_tconv_err <= 1e-5, "conv_transpose2d max abs error {max_tconv_err:.2e}");

    // Adjoint identity ⟨conv(x), y⟩ = ⟨x, convᵀ(y)⟩ in f64. The same weight
    // tensor serves both directions: conv reads it as [out, in, k, k] and
    // the transpose as [in, out, k, k].
    let mut max_adjoint_err = 0f64;
    for trial in 0..40u64 {
        let mut rng = rng::seeded_stream(fnv("adjoint"), trial + 1);
        let n = 1 + rr(&mut rng, 2);
        let ci = 1 + rr(&mut rng, 3);
        let co = 1 + rr(&mut rng, 3);
        let k = 1 + rr(&mut rng, 3);
        let stride = 1 + rr(&mut rng, 2);
        let pad = rr(&mut rng, 2).min(k.saturating_sub(1));
        let mut oh = 1 + rr(&mut rng, 3);
        let mut ow = 1 + rr(&mut rng, 3);
        // Pick output sizes first so input sizes land exactly on the stride
        // grid and the two directions are true adjoints of each other.
        while (oh - 1) * stride + k < 2 * pad + 1 {
            oh += 1;
        }
        while (ow - 1) * stride + k < 2 * pad + 1 {
            ow += 1;
        }
        let h = (oh - 1) * stride + k - 2 * pad;
        let w = (ow - 1) * stride + k - 2 * pad;

        let x = utensor::<f64>(&mut rng, &[n, ci, h, w], -1.0, 1.0);
        let wgt = utensor::<f64>(&mut rng, &[co, ci, k, k], -1.0, 1.0);
        let y = utensor::<f64>(&mut rng, &[n, co, oh, ow], -1.0, 1.0);

        let conv_x = ops::conv2d(&x, &wgt, None, stride, pad).expect("conv2d");
        assert_eq!(conv_x.shape(), y.shape());
        let tconv_y = ops::conv_transpose2d(&y, &wgt, None, stride, pad).expect("tconv");
        assert_eq!(tconv_y.shape(), x.shape());

        let lhs = dot(conv_x.data(), y.data());
        let rhs = dot(x.data(), tconv_y.data());
        max_adjoint_err = max_adjoint_err.max((lhs - rhs).abs());
    }
    assert!(max_adjoint_err <= 1e-6, "adjoint identity error {max_adjoint_err:.2e}");

    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE C4 PASS ({shapes} shapes vs direct loops, conv err {max_conv_err:.1e}, \
         tconv err {max_tconv_err:.1e}, adjoint err {max_adjoint_err:.1e}, {elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// C5 — DCGAN layer audit: exact layer-kind counts, all kernels 4×4.
// ---------------------------------------------------------------------------

#[test]
fn c5_dcgan_pair_has_the_documented_layer_counts() {
    let start = Instant::now();
    let generator = build_generator::<f32>(100, 32, 64, 0).expect("generator");
    let discriminator = build_discriminator::<f32>(64, 32, 0).expect("discriminator");

    assert_eq!(
        generator.audit(),
        LayerAudit { conv: 0, conv_transpose: 5, batchnorm: 4, relu: 4, leaky_relu: 0, tanh: 1, sigmoid: 0 }
    );
    assert_eq!(
        discriminator.audit(),
        LayerAudit { conv: 5, conv_transpose: 0, batchnorm: 3, relu: 0, leaky_relu: 4, tanh: 0, sigmoid: 1 }
    );
    assert!(generator.all_kernels_are(4), "generator kernels must all be 4×4");
    assert!(discriminator.all_kernels_are(4), "discriminator kernels must all be 4×4");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!(
        "ACCEPTANCE C5 PASS (G: 5 tconv/4 bn/4 relu/1 tanh, D: 5 conv/3 bn/4 leaky, \
         kernels 4×4, {elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// C6 — GAN training settles the discriminator near the 0.5 equilibrium.
// ---------------------------------------------------------------------------

#[test]
fn c6_gan_training_reaches_the_discriminator_equilibrium_band() {
    let start = Instant::now();
    let data = synth_fixture_dataset(FixtureKind::Blobs, 64, 8, 0.05, 11).expect("fixture");
    let class0 = data.class_indices().remove(&0).expect("class 0 present");
    let subset = data.subset(&class0);

    let mut finals = Vec::new();
    let mut in_band = 0usize;
    for seed in [1u64, 2, 3] {
        let config = GanTrainConfig {
            iterations: 1500,
            batch_size: 16,
            latent_dim: 16,
            base_channels: 8,
            image_size: 8,
            d_steps: 1,
            generator_loss: Default::default(),
            g_opt: OptimizerConfig::adam(2e-4, 0.5),
            d_opt: OptimizerConfig::adam(2e-4, 0.5),
            seed,
        };
        let (_, _, report) = train_gan::<f32>(&subset, &config).expect("training succeeds");
        let (d_real, d_fake) = report
            .rows
            .iter()
            .rev()
            .find_map(|row| match row {
                TrainRow::Gan { d_real, d_fake, .. } => Some((*d_real, *d_fake)),
                _ => None,
            })
            .expect("at least one iteration row");
        if (0.3..=0.7).contains(&d_real) && (0.3..=0.7).contains(&d_fake) {
            in_band += 1;
        }
        finals.push((seed, d_real, d_fake));
    }

    let elapsed = start.elapsed();
    assert!(
        in_band >= 2,
        "want ≥ 2 of 3 seeds with final D(real), D(fake) in [0.3, 0.7], got {finals:?}"
    );
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    println!(
        "ACCEPTANCE C6 PASS ({in_band}/3 seeds in band at 1500 iterations, finals {finals:?}, \
         {elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// C7 — classifier reaches ≥ 95%, and GAN augmentation costs ≤ 2 points.
// ---------------------------------------------------------------------------

#[test]
fn c7_classifier_accuracy_survives_gan_augmentation() {
    fn config(out: &Path, multiplier: usize) -> RunConfig {
        RunConfig {
            output_dir: out.to_path_buf(),
            mode: "sound".into(),
            multiplier,
            image_size: 16,
            seed: 0,
            fixture: FixtureSection { kind: "bars".into(), per_class: 200, noise: 0.15 },
            gan: GanSection {
                iterations: 300,
                batch_size: 16,
                latent_dim: 16,
                base_channels: 8,
                ..GanSection::default()
            },
            classifier: ClassifierSection {
                backbone: "resnet18_mini".into(),
                epochs: 4,
                batch_size: 16,
                learning_rate: 3e-3,
                ..ClassifierSection::default()
            },
            ..RunConfig::default()
        }
    }

    let tmp = tempdir().expect("tempdir");

    let baseline_start = Instant::now();
    let baseline = run_pipeline(&config(&tmp.path().join("baseline"), 1)).expect("baseline run");
    let baseline_elapsed = baseline_start.elapsed();
    assert!(
        baseline.metrics.accuracy >= 0.95,
        "baseline accuracy {:.4} below 0.95",
        baseline.metrics.accuracy
    );
    assert!(baseline_elapsed < Duration::from_secs(120), "baseline took {baseline_elapsed:?}");
    assert_eq!(baseline.counts.synthetic_total, 0, "multiplier 1 must not synthesize");

    let augmented = run_pipeline(&config(&tmp.path().join("augmented"), 5)).expect("augmented run");
    assert_eq!(augmented.counts.test_synthetic, 0, "sound mode keeps the test set real");
    assert_eq!(augmented.counts.train_total, 1600, "320 real train × 5");
    assert!(
        augmented.metrics.accuracy >= baseline.metrics.accuracy - 0.02,
        "augmented accuracy {:.4} dropped more than 2 points below baseline {:.4}",
        augmented.metrics.accuracy,
        baseline.metrics.accuracy
    );

    println!(
        "ACCEPTANCE C7 PASS (baseline {:.2}% in {:.0?}, ×5 augmented {:.2}%)",
        baseline.metrics.accuracy * 100.0,
        baseline_elapsed,
        augmented.metrics.accuracy * 100.0
    );
}

// ---------------------------------------------------------------------------
// C8 — determinism across runs; checkpoints round-trip bitwise.
// ---------------------------------------------------------------------------

#[test]
fn c8_identical_runs_agree_and_checkpoints_round_trip_bitwise() {
    let start = Instant::now();
    let tmp = tempdir().expect("tempdir");

    fn config(out: &Path) -> RunConfig {
        RunConfig {
            output_dir: out.to_path_buf(),
            mode: "sound".into(),
            multiplier: 2,
            image_size: 16,
            seed: 5,
            fixture: FixtureSection { kind: "bars".into(), per_class: 24, noise: 0.1 },
            gan: GanSection {
                iterations: 10,
                batch_size: 8,
                latent_dim: 8,
                base_channels: 4,
                ..GanSection::default()
            },
            classifier: ClassifierSection {
                backbone: "alexnet_mini".into(),
                epochs: 1,
                batch_size: 8,
                ..ClassifierSection::default()
            },
            ..RunConfig::default()
        }
    }

    let first = run_pipeline(&config(&tmp.path().join("a"))).expect("first run");
    let second = run_pipeline(&config(&tmp.path().join("b"))).expect("second run");
    assert_identical(&first, &second);
    let first_ckpt = fs::read(first.output_dir.join("classifier.gdlc")).expect("read");
    let second_ckpt = fs::read(second.output_dir.join("classifier.gdlc")).expect("read");
    assert_eq!(first_ckpt, second_ckpt, "classifier checkpoints differ between runs");

    // Save → load → save must be bitwise stable for every model kind.
    let mut models: Vec<(String, ModelGraph<f32>)> = vec![
        ("generator".into(), build_generator(8, 4, 8, 3).expect("generator")),
        ("discriminator".into(), build_discriminator(8, 4, 3).expect("discriminator")),
    ];
    for kind in BackboneKind::ALL {
        models.push((kind.name().into(), build_backbone(kind, 16, 2, 3).expect("backbone")));
    }
    for (name, model) in &models {
        let first_path = tmp.path().join(format!("{name}_first.gdlc"));
        let second_path = tmp.path().join(format!("{name}_second.gdlc"));
        save_checkpoint(model, &first_path).expect("save");
        let loaded = load_checkpoint::<f32>(&first_path).expect("load");
        assert_eq!(loaded.checksum(), model.checksum(), "{name}: parameter checksum drifted");
        save_checkpoint(&loaded, &second_path).expect("re-save");
        let original = fs::read(&first_path).expect("read");
        let round_tripped = fs::read(&second_path).expect("read");
        assert_eq!(original, round_tripped, "{name}: checkpoint bytes not stable");
    }

    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE C8 PASS (two runs byte-identical, {} model kinds round-trip bitwise, \
         {elapsed:.1?})",
        models.len()
    );
}

fn assert_identical(first: &PipelineOutcome, second: &PipelineOutcome) {
    assert_eq!(first.metrics_text, second.metrics_text, "metrics bytes differ");
    assert_eq!(first.confusion_text, second.confusion_text, "confusion bytes differ");
    assert_eq!(first.summary, second.summary, "summary bytes differ");
}

// ---------------------------------------------------------------------------
// C9 — the README states the limits; the pipeline accepts the real layout.
// ---------------------------------------------------------------------------

#[test]
fn c9_readme_states_limits_and_pipeline_accepts_the_real_layout() {
    let readme_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let readme = fs::read_to_string(&readme_path).expect("workspace README exists");
    let lower = readme.to_lowercase();
    for needle in ["not reproducible", "pretrained", "clinical"] {
        assert!(lower.contains(needle), "README must state why the 99% result needs `{needle}`");
    }

    // A Normal/Pneumonia directory tree of PNGs runs through the full
    // split-after-augment pipeline, so the real dataset drops in unchanged.
    let tmp = tempdir().expect("tempdir");
    let root = tmp.path().join("xray");
    let images = synth_fixture_dataset(FixtureKind::Bars, 12, 16, 0.1, 21).expect("fixture");
    for (i, record) in images.records.iter().enumerate() {
        let dir = root.join(if record.label == 0 { "Normal" } else { "Pneumonia" });
        fs::create_dir_all(&dir).expect("create class dir");
        save_grayscale_png(&dir.join(format!("img_{i:03}.png")), &record.pixels, 16)
            .expect("write png");
    }

    let config = RunConfig {
        data_root: Some(root),
        output_dir: tmp.path().join("out"),
        mode: "paper".into(),
        multiplier: 2,
        image_size: 16,
        seed: 9,
        gan: GanSection {
            iterations: 8,
            batch_size: 8,
            latent_dim: 8,
            base_channels: 4,
            ..GanSection::default()
        },
        classifier: ClassifierSection {
            backbone: "alexnet_mini".into(),
            epochs: 1,
            batch_size: 8,
            ..ClassifierSection::default()
        },
        ..RunConfig::default()
    };
    let outcome = run_pipeline(&config).expect("pipeline accepts the directory layout");
    assert_eq!(outcome.counts.real_total, 24);
    assert_eq!(outcome.counts.synthetic_total, 24, "multiplier 2 doubles the corpus");
    assert_eq!(outcome.counts.merged_total, 48);
    assert_eq!(outcome.counts.train_total + outcome.counts.test_total, 48);
    assert!(outcome.summary.contains("data_source=directory:"), "summary names the source");

    println!(
        "ACCEPTANCE C9 PASS (README states the limits; Normal/Pneumonia tree ran end to end)"
    );
}

// ---------------------------------------------------------------------------
// Finite-difference harness (C3).
// ---------------------------------------------------------------------------

/// One sampled gradient-check case: leaf `inputs` get checked, `consts`
/// enter the loss as constants (weights, targets, running statistics),
/// `labels`/`params` carry class indices and stride/pad choices.
struct Case<E: Element> {
    inputs: Vec<Tensor<E>>,
    consts: Vec<Tensor<E>>,
    labels: Vec<usize>,
    params: Vec<usize>,
}

impl<E: Element> Case<E> {
    fn new(inputs: Vec<Tensor<E>>) -> Case<E> {
        Case { inputs, consts: Vec::new(), labels: Vec::new(), params: Vec::new() }
    }
}

type GenFn<E> = Box<dyn Fn(&mut ChaCha8Rng) -> Case<E>>;
type BuildFn<E> = Box<dyn Fn(&mut Tape<E>, &[Val], &Case<E>) -> gandl_core::Result<Val>>;

/// Runs every op through `cases_per_op` random cases, comparing each analytic
/// partial derivative against a central finite difference with step `step`.
/// Returns (ops covered, partial derivatives checked).
fn grad_check_suite<E: Element>(tol: f64, step: f64, cases_per_op: usize) -> (usize, usize) {
    let suite = op_suite::<E>();
    let op_count = suite.len();
    let mut checked = 0usize;

    for (name, gen, build) in suite {
        for case_idx in 0..cases_per_op {
            let mut case_rng = rng::seeded_stream(fnv(name), case_idx as u64 + 1);
            let case = gen(&mut case_rng);

            let mut tape = Tape::new();
            let vals: Vec<Val> = case
                .inputs
                .iter()
                .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
                .collect();
            let loss = build(&mut tape, &vals, &case)
                .unwrap_or_else(|e| panic!("{name} case {case_idx}: forward failed: {e}"));
            assert_eq!(
                tape.value(loss).expect("loss exists").numel(),
                1,
                "{name}: checked loss must be scalar"
            );
            tape.backward(loss).expect("backward");
            let analytic: Vec<Vec<E>> = vals
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .expect("valid handle")
                        .unwrap_or_else(|| panic!("{name}: input left without a gradient"))
                        .to_vec()
                })
                .collect();

            let eval = |inputs: &[Tensor<E>]| -> f64 {
                let mut t = Tape::new();
                let vs: Vec<Val> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
                let l = build(&mut t, &vs, &case).expect("forward");
                t.value(l).expect("loss").data()[0].as_f64()
            };

            for (i, input) in case.inputs.iter().enumerate() {
                for (j, &a) in analytic[i].iter().enumerate() {
                    let x0 = input.data()[j].as_f64();
                    let mut plus = case.inputs.clone();
                    plus[i].data_mut()[j] = E::from_f64(x0 + step);
                    let mut minus = case.inputs.clone();
                    minus[i].data_mut()[j] = E::from_f64(x0 - step);
                    // Measure the step the element type actually stored, so
                    // f32 rounding does not masquerade as gradient error.
                    let span = plus[i].data()[j].as_f64() - minus[i].data()[j].as_f64();
                    let fd = (eval(&plus) - eval(&minus)) / span;
                    let got = a.as_f64();
                    let rel = (got - fd).abs() / fd.abs().max(1.0);
                    assert!(
                        rel <= tol,
                        "{name} case {case_idx}, input {i}[{j}]: analytic {got:.6e} vs \
                         finite difference {fd:.6e} (relative error {rel:.2e} > {tol:.0e})"
                    );
                    checked += 1;
                }
            }
        }
    }
    (op_count, checked)
}

/// Every differentiable tape operation, each paired with an input sampler
/// that respects its domain (positive inputs for log, a margin around relu
/// kinks, probabilities inside (0, 1) for the losses).
fn op_suite<E: Element>() -> Vec<(&'static str, GenFn<E>, BuildFn<E>)> {
    let mut suite: Vec<(&'static str, GenFn<E>, BuildFn<E>)> = Vec::new();

    suite.push((
        "add",
        Box::new(|rng| binary_case(rng, &[2, 3, 4])),
        Box::new(|t, v, c| {
            let y = t.add(v[0], v[1])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "sub",
        Box::new(|rng| binary_case(rng, &[2, 3, 4])),
        Box::new(|t, v, c| {
            let y = t.sub(v[0], v[1])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "mul",
        Box::new(|rng| binary_case(rng, &[2, 3, 4])),
        Box::new(|t, v, c| {
            let y = t.mul(v[0], v[1])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "neg",
        Box::new(|rng| unary_case(rng, &[2, 3, 4], -2.0, 2.0)),
        Box::new(|t, v, c| {
            let y = t.neg(v[0])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "log",
        Box::new(|rng| unary_case(rng, &[2, 3, 4], 0.2, 3.0)),
        Box::new(|t, v, c| {
            let y = t.log(v[0])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "exp",
        Box::new(|rng| unary_case(rng, &[2, 3, 4], -2.0, 2.0)),
        Box::new(|t, v, c| {
            let y = t.exp(v[0])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "relu",
        Box::new(|rng| kink_case(rng, &[2, 3, 4])),
        Box::new(|t, v, c| {
            let y = t.relu(v[0])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "leaky_relu",
        Box::new(|rng| kink_case(rng, &[2, 3, 4])),
        Box::new(|t, v, c| {
            let y = t.leaky_relu(v[0], 0.2)?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "tanh",
        Box::new(|rng| unary_case(rng, &[2, 3, 4], -3.0, 3.0)),
        Box::new(|t, v, c| {
            let y = t.tanh(v[0])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "sigmoid",
        Box::new(|rng| unary_case(rng, &[2, 3, 4], -3.0, 3.0)),
        Box::new(|t, v, c| {
            let y = t.sigmoid(v[0])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "matmul",
        Box::new(|rng| {
            let a = utensor(rng, &[3, 4], -1.5, 1.5);
            let b = utensor(rng, &[4, 2], -1.5, 1.5);
            let mut case = Case::new(vec![a, b]);
            case.consts.push(utensor(rng, &[3, 2], -1.0, 1.0));
            case
        }),
        Box::new(|t, v, c| {
            let y = t.matmul(v[0], v[1])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "bias_add_rows",
        Box::new(|rng| {
            let x = utensor(rng, &[4, 3], -1.5, 1.5);
            let b = utensor(rng, &[3], -1.0, 1.0);
            let mut case = Case::new(vec![x, b]);
            case.consts.push(utensor(rng, &[4, 3], -1.0, 1.0));
            case
        }),
        Box::new(|t, v, c| {
            let y = t.bias_add_rows(v[0], v[1])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "reshape",
        Box::new(|rng| {
            let x = utensor(rng, &[2, 3, 4], -2.0, 2.0);
            let mut case = Case::new(vec![x]);
            case.consts.push(utensor(rng, &[6, 4], -1.0, 1.0));
            case
        }),
        Box::new(|t, v, c| {
            let y = t.reshape(v[0], &[6, 4])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "conv2d",
        Box::new(|rng| {
            let stride = 1 + rr(rng, 2);
            let pad = rr(rng, 2);
            let out = (5 + 2 * pad - 3) / stride + 1;
            let x = utensor(rng, &[1, 2, 5, 5], -1.0, 1.0);
            let w = utensor(rng, &[2, 2, 3, 3], -1.0, 1.0);
            let b = utensor(rng, &[2], -0.5, 0.5);
            let mut case = Case::new(vec![x, w, b]);
            case.consts.push(utensor(rng, &[1, 2, out, out], -1.0, 1.0));
            case.params = vec![stride, pad];
            case
        }),
        Box::new(|t, v, c| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), c.params[0], c.params[1])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "conv_transpose2d",
        Box::new(|rng| {
            let stride = 1 + rr(rng, 2);
            let pad = rr(rng, 2);
            let out = (3 - 1) * stride + 3 - 2 * pad;
            let x = utensor(rng, &[1, 2, 3, 3], -1.0, 1.0);
            let w = utensor(rng, &[2, 2, 3, 3], -1.0, 1.0);
            let b = utensor(rng, &[2], -0.5, 0.5);
            let mut case = Case::new(vec![x, w, b]);
            case.consts.push(utensor(rng, &[1, 2, out, out], -1.0, 1.0));
            case.params = vec![stride, pad];
            case
        }),
        Box::new(|t, v, c| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), c.params[0], c.params[1])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "batchnorm2d_train",
        Box::new(|rng| {
            let x = utensor(rng, &[2, 2, 3, 3], -2.0, 2.0);
            let gamma = utensor(rng, &[2], 0.5, 1.5);
            let beta = utensor(rng, &[2], -0.5, 0.5);
            let mut case = Case::new(vec![x, gamma, beta]);
            case.consts.push(utensor(rng, &[2, 2, 3, 3], -1.0, 1.0));
            case.consts.push(Tensor::zeros(&[2]));
            case.consts.push(Tensor::from_f64s(&[2], &[1.0, 1.0]).expect("running var"));
            case
        }),
        Box::new(|t, v, c| {
            let (y, _, _) =
                t.batchnorm2d_train(v[0], v[1], v[2], &c.consts[1], &c.consts[2], 1e-5, 0.1)?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "batchnorm2d_eval",
        Box::new(|rng| {
            let x = utensor(rng, &[2, 2, 3, 3], -2.0, 2.0);
            let gamma = utensor(rng, &[2], 0.5, 1.5);
            let beta = utensor(rng, &[2], -0.5, 0.5);
            let mut case = Case::new(vec![x, gamma, beta]);
            case.consts.push(utensor(rng, &[2, 2, 3, 3], -1.0, 1.0));
            case.consts.push(utensor(rng, &[2], -0.5, 0.5));
            case.consts.push(utensor(rng, &[2], 0.5, 1.5));
            case
        }),
        Box::new(|t, v, c| {
            let y = t.batchnorm2d_eval(v[0], v[1], v[2], &c.consts[1], &c.consts[2], 1e-5)?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "avg_pool2d",
        Box::new(|rng| {
            let x = utensor(rng, &[1, 2, 4, 4], -2.0, 2.0);
            let mut case = Case::new(vec![x]);
            case.consts.push(utensor(rng, &[1, 2, 2, 2], -1.0, 1.0));
            case
        }),
        Box::new(|t, v, c| {
            let y = t.avg_pool2d(v[0], 2, 2, 0)?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "concat_channels",
        Box::new(|rng| {
            let a = utensor(rng, &[1, 2, 3, 3], -2.0, 2.0);
            let b = utensor(rng, &[1, 1, 3, 3], -2.0, 2.0);
            let mut case = Case::new(vec![a, b]);
            case.consts.push(utensor(rng, &[1, 3, 3, 3], -1.0, 1.0));
            case
        }),
        Box::new(|t, v, c| {
            let y = t.concat_channels(&[v[0], v[1]])?;
            weighted_mean(t, y, c)
        }),
    ));
    suite.push((
        "mean_all",
        Box::new(|rng| unary_case(rng, &[2, 3, 4], -2.0, 2.0)),
        Box::new(|t, v, _| t.mean_all(v[0])),
    ));
    suite.push((
        "bce",
        Box::new(|rng| {
            let x = utensor(rng, &[2, 3], -2.0, 2.0);
            let mut case = Case::new(vec![x]);
            let targets: Vec<f64> = (0..6).map(|_| f64::from(rr(rng, 2) as u32)).collect();
            case.consts.push(Tensor::from_f64s(&[2, 3], &targets).expect("targets"));
            case
        }),
        Box::new(|t, v, c| {
            let p = t.sigmoid(v[0])?;
            t.bce(p, &c.consts[0])
        }),
    ));
    suite.push((
        "softmax_cross_entropy",
        Box::new(|rng| {
            let logits = utensor(rng, &[4, 3], -2.0, 2.0);
            let mut case = Case::new(vec![logits]);
            case.labels = (0..4).map(|_| rr(rng, 3)).collect();
            case
        }),
        Box::new(|t, v, c| t.softmax_cross_entropy(v[0], &c.labels)),
    ));

    suite
}

/// Scalarizes `y` as mean(y ⊙ weights) with the case's fixed random weights,
/// so sign errors cannot cancel the way a plain mean would let them.
fn weighted_mean<E: Element>(
    tape: &mut Tape<E>,
    y: Val,
    case: &Case<E>,
) -> gandl_core::Result<Val> {
    let weights = tape.constant(case.consts[0].clone());
    let weighted = tape.mul(y, weights)?;
    tape.mean_all(weighted)
}

fn unary_case<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Case<E> {
    let x = utensor(rng, shape, lo, hi);
    let mut case = Case::new(vec![x]);
    case.consts.push(utensor(rng, shape, -1.0, 1.0));
    case
}

fn binary_case<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Case<E> {
    let a = utensor(rng, shape, -2.0, 2.0);
    let b = utensor(rng, shape, -2.0, 2.0);
    let mut case = Case::new(vec![a, b]);
    case.consts.push(utensor(rng, shape, -1.0, 1.0));
    case
}

/// Inputs kept at least 0.05 away from the relu/leaky-relu kink, so the
/// finite-difference step never crosses it.
fn kink_case<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Case<E> {
    let mut case = unary_case::<E>(rng, shape, -2.0, 2.0);
    for v in case.inputs[0].data_mut() {
        let x = v.as_f64();
        if x.abs() < 0.05 {
            *v = E::from_f64(if x >= 0.0 { x + 0.1 } else { x - 0.1 });
        }
    }
    case
}

// ---------------------------------------------------------------------------
// Direct-loop convolution oracles (C4).
// ---------------------------------------------------------------------------

/// Builds f64 reference data, runs the library in f32 on the same values,
/// and returns the max abs difference against `oracle_conv2d`.
#[allow(clippy::too_many_arguments)]
fn compare_conv(
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> f64 {
    let mut rng = rng::seeded_stream(fnv("oracle_conv"), fnv_mix(&[n, ci, co, h, w, k, stride, pad]));
    let x = uvec(&mut rng, n * ci * h * w);
    let wgt = uvec(&mut rng, co * ci * k * k);
    let bias = with_bias.then(|| uvec(&mut rng, co));

    let (want, want_shape) =
        oracle_conv2d(&x, [n, ci, h, w], &wgt, [co, ci, k, k], bias.as_deref(), stride, pad);

    let x32 = tensor_f32(&[n, ci, h, w], &x);
    let w32 = tensor_f32(&[co, ci, k, k], &wgt);
    let b32 = bias.as_ref().map(|b| tensor_f32(&[co], b));
    let got = ops::conv2d(&x32, &w32, b32.as_ref(), stride, pad).expect("conv2d");

    assert_eq!(got.shape(), want_shape, "conv2d shape for n{n} ci{ci} co{co} {h}×{w} k{k} s{stride} p{pad}");
    max_abs_diff(got.data(), &want)
}

#[allow(clippy::too_many_arguments)]
fn compare_tconv(
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> f64 {
    let mut rng =
        rng::seeded_stream(fnv("oracle_tconv"), fnv_mix(&[n, ci, co, h, w, k, stride, pad]));
    let x = uvec(&mut rng, n * ci * h * w);
    let wgt = uvec(&mut rng, ci * co * k * k);
    let bias = with_bias.then(|| uvec(&mut rng, co));

    let (want, want_shape) = oracle_conv_transpose2d(
        &x,
        [n, ci, h, w],
        &wgt,
        [ci, co, k, k],
        bias.as_deref(),
        stride,
        pad,
    );

    let x32 = tensor_f32(&[n, ci, h, w], &x);
    let w32 = tensor_f32(&[ci, co, k, k], &wgt);
    let b32 = bias.as_ref().map(|b| tensor_f32(&[co], b));
    let got = ops::conv_transpose2d(&x32, &w32, b32.as_ref(), stride, pad).expect("tconv");

    assert_eq!(got.shape(), want_shape, "tconv shape for n{n} ci{ci} co{co} {h}×{w} k{k} s{stride} p{pad}");
    max_abs_diff(got.data(), &want)
}

/// Plain gather-loop convolution: out[b,oc,oy,ox] = bias[oc] +
/// Σ x[b,ic,oy·s+ky−p, ox·s+kx−p] · w[oc,ic,ky,kx] over in-range taps.
fn oracle_conv2d(
    x: &[f64],
    xs: [usize; 4],
    wgt: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, w] = xs;
    let [co, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[((b * ci + ic) * h + iy as usize) * w + ix as usize]
                                        * wgt[((oc * ci + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((b * co + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

/// Plain gather-loop transposed convolution: each output tap pulls from the
/// input position that would have produced it under the forward convolution.
fn oracle_conv_transpose2d(
    x: &[f64],
    xs: [usize; 4],
    wgt: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, w] = xs;
    let [_, co, kh, kw] = ws;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let ny = oy as isize + pad as isize - ky as isize;
                                let nx = ox as isize + pad as isize - kx as isize;
                                if ny < 0 || nx < 0 {
                                    continue;
                                }
                                let (ny, nx) = (ny as usize, nx as usize);
                                if ny % stride == 0 && nx % stride == 0 {
                                    let (iy, ix) = (ny / stride, nx / stride);
                                    if iy < h && ix < w {
                                        acc += x[((b * ci + ic) * h + iy) * w + ix]
                                            * wgt[((ic * co + oc) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                    out[((b * co + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

// ---------------------------------------------------------------------------
// Shared numeric helpers.
// ---------------------------------------------------------------------------

/// FNV-1a over an op name, used to give every op its own RNG stream family.
fn fnv(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn fnv_mix(parts: &[usize]) -> u64 {
    parts
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &p| (h ^ p as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Uniform integer in `0..n` (rand's range sampling, kept behind one name).
fn rr(rng: &mut ChaCha8Rng, n: usize) -> usize {
    use rand::Rng;
    rng.random_range(0..n)
}

fn uvec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    use rand::Rng;
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn utensor<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
    use rand::Rng;
    let len: usize = shape.iter().product();
    let values: Vec<f64> = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64s(shape, &values).expect("tensor builds")
}

fn tensor_f32(shape: &[usize], values: &[f64]) -> Tensor<f32> {
    Tensor::from_f64s(shape, values).expect("tensor builds")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs_diff<E: Element>(got: &[E], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(g, w)| (g.as_f64() - w).abs()).fold(0.0, f64::max)
}

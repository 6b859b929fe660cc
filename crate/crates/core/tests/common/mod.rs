#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use headsearch::encoder::{pretrain, EncoderDims, EncoderWeights, PretrainSettings, SyntheticCorpus};
use headsearch::head::build_head;
use headsearch::nn::{check_gradients, GradCheck, Graph, SeqLayout, Tensor, Var};
use headsearch::searchspace::{ArchitectureColumn, ConvSpec, EncoderSpec, HeadConfig, MlpSpec, PoolingKind};
use headsearch::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero so ReLU kinks stay out of reach of the
/// finite-difference step.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn reduce(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    g.weighted_sum(y, &weights(n, 99))
}

fn ragged() -> Arc<SeqLayout> {
    Arc::new(SeqLayout::new(3, 5, vec![5, 2, 4]).unwrap())
}

/// Every differentiable op plus an assembled head and a small base encoder.
pub fn gradient_suite() -> Vec<(String, GradCheck)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| {
        let r = check_gradients(&inputs, STEP, f).unwrap_or_else(|e| panic!("{name}: {e}"));
        out.push((name.to_string(), r));
    };
    let layout = ragged();

    run("matmul", vec![rand_tensor(&[4, 3], &mut rng), rand_tensor(&[3, 5], &mut rng)], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        reduce(g, y)
    });
    run("add", vec![rand_tensor(&[3, 4], &mut rng), rand_tensor(&[3, 4], &mut rng)], &|g, v| {
        let y = g.add(v[0], v[1])?;
        reduce(g, y)
    });
    run("add_row", vec![rand_tensor(&[3, 4], &mut rng), rand_tensor(&[4], &mut rng)], &|g, v| {
        let y = g.add_row(v[0], v[1])?;
        reduce(g, y)
    });
    run(
        "linear",
        vec![rand_tensor(&[5, 3], &mut rng), rand_tensor(&[3, 2], &mut rng), rand_tensor(&[2], &mut rng)],
        &|g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            reduce(g, y)
        },
    );
    run("relu", vec![off_kink(&[4, 6], &mut rng)], &|g, v| {
        let y = g.relu(v[0]);
        reduce(g, y)
    });
    run(
        "layer_norm",
        vec![rand_tensor(&[4, 6], &mut rng), rand_tensor(&[6], &mut rng), rand_tensor(&[6], &mut rng)],
        &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            reduce(g, y)
        },
    );
    run("embedding", vec![rand_tensor(&[6, 3], &mut rng)], &|g, v| {
        let y = g.embedding(v[0], &[1, 4, 1, 0, 5])?;
        reduce(g, y)
    });
    run("gather_rows", vec![rand_tensor(&[5, 3], &mut rng)], &|g, v| {
        let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
        reduce(g, y)
    });
    run("mask_rows", vec![rand_tensor(&[4, 3], &mut rng)], &|g, v| {
        let y = g.mask_rows(v[0], &[true, false, true, false])?;
        reduce(g, y)
    });
    for width in [1, 3, 5] {
        let l = Arc::clone(&layout);
        run(
            &format!("conv1d_same(width {width})"),
            vec![rand_tensor(&[15, 4], &mut rng), rand_tensor(&[3, 4, width], &mut rng)],
            &move |g, v| {
                let y = g.conv1d_same(v[0], v[1], &l)?;
                reduce(g, y)
            },
        );
    }
    let l = Arc::clone(&layout);
    run("attention", vec![rand_tensor(&[15, 12], &mut rng)], &move |g, v| {
        let y = g.attention(v[0], 2, &l)?;
        reduce(g, y)
    });
    for kind in PoolingKind::ALL {
        let l = Arc::clone(&layout);
        run(&format!("pool({})", kind.as_str()), vec![rand_tensor(&[15, 4], &mut rng)], &move |g, v| {
            let y = g.pool(v[0], kind, &l)?;
            reduce(g, y)
        });
    }
    run("softmax_cross_entropy", vec![rand_tensor(&[4, 3], &mut rng)], &|g, v| {
        g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
    });
    run("weighted_sum", vec![rand_tensor(&[3, 3], &mut rng)], &|g, v| reduce(g, v[0]));

    let config = HeadConfig {
        pooling: PoolingKind::Mean,
        freeze_base: false,
        mlp: MlpSpec::deep(3, 7),
        conv: ConvSpec::new(6, 3, 2, true),
        encoder: EncoderSpec::new(2, 1),
    };
    let head = build_head(&config, 8, 3, &mut rng).expect("valid head");
    let mut inputs = vec![rand_tensor(&[15, 8], &mut rng)];
    inputs.extend(head.store().tensors().iter().cloned());
    let l = Arc::clone(&layout);
    run("assembled head", inputs, &move |g, v| {
        let logits = head.forward(g, &v[1..], v[0], &l)?;
        g.softmax_cross_entropy(logits, &[2, 0, 1])
    });

    let dims = EncoderDims {
        vocab: 10,
        dim: 8,
        max_len: 5,
        blocks: 1,
        heads: 2,
    };
    let base = EncoderWeights::init(dims, &mut rng).expect("valid dims");
    let batch = headsearch::encoder::TokenBatch::new(&[vec![0u32, 4, 7, 1], vec![0, 9, 3, 5]], 5).unwrap();
    run("base encoder", base.store().tensors().to_vec(), &move |g, v| {
        let y = base.forward(g, v, &batch)?;
        reduce(g, y)
    });
    out
}

/// Cache location of [`pretrained_base`]; the file exists once that has
/// been called.
pub fn pretrained_path() -> PathBuf {
    let settings = PretrainSettings::default();
    let name = format!("pretrained-s0-{}-{}.hsw", settings.steps, settings.lr);
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name)
}

/// Pretrained weights shared by the slow tests, built once per test binary
/// and cached on disk between runs.
pub fn pretrained_base() -> &'static EncoderWeights {
    static BASE: OnceLock<EncoderWeights> = OnceLock::new();
    BASE.get_or_init(|| {
        let path = pretrained_path();
        if let Ok(w) = EncoderWeights::load(&path) {
            return w;
        }
        let (w, _) = pretrain(
            &SyntheticCorpus::standard(0),
            EncoderDims::default(),
            &PretrainSettings::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .expect("pretraining");
        let tmp = tempfile::NamedTempFile::new_in(env!("CARGO_TARGET_TMPDIR")).expect("temp file");
        w.save(tmp.path()).expect("save weights");
        tmp.persist(&path).expect("persist weights");
        w
    })
}

fn column(
    pooling: PoolingKind,
    linear: (u32, Option<u32>),
    conv: Option<(u32, u32, u32, bool)>,
    attention: Option<(u32, u32)>,
) -> ArchitectureColumn {
    ArchitectureColumn {
        pooling,
        linear_layers: linear.0,
        hidden: linear.1,
        conv_layers: conv.map_or(0, |c| c.0),
        conv_heads: conv.map(|c| c.1),
        kernel: conv.map(|c| c.2),
        skip: conv.map(|c| c.3),
        attention_layers: attention.map_or(0, |a| a.0),
        attention_heads: attention.map(|a| a.1),
    }
}

/// Head architectures reported for the six GLUE tasks, on the full data
/// and on the 500-example variants. Conv is `(layers, heads, kernel,
/// skip)`, attention is `(layers, heads)`.
pub fn reported_architectures() -> Vec<(&'static str, ArchitectureColumn)> {
    use PoolingKind::{Cls, Max, Mean};
    vec![
        ("full/sst2", column(Mean, (5, Some(50)), None, Some((1, 4)))),
        ("full/cola", column(Cls, (1, None), None, None)),
        ("full/mrpc", column(Cls, (4, Some(74)), Some((4, 107, 7, true)), Some((4, 16)))),
        ("full/mnli", column(Max, (3, Some(117)), Some((3, 9, 11, true)), None)),
        ("full/rte", column(Cls, (1, None), None, None)),
        ("full/qqp", column(Max, (1, None), Some((2, 159, 7, true)), None)),
        ("small/sst2", column(Max, (1, None), None, Some((1, 8)))),
        ("small/cola", column(Cls, (1, None), None, None)),
        ("small/mrpc", column(Mean, (2, Some(60)), Some((2, 90, 7, true)), None)),
        ("small/mnli", column(Max, (2, Some(172)), Some((2, 75, 11, false)), None)),
        ("small/rte", column(Mean, (1, None), Some((5, 14, 5, true)), None)),
        ("small/qqp", column(Cls, (2, Some(122)), Some((1, 43, 11, false)), None)),
    ]
}

pub const GLUE_TASKS: [&str; 6] = ["sst2", "cola", "mrpc", "mnli", "rte", "qqp"];
/// Reported test accuracies of the single-dense-layer baseline and of the
/// searched heads, full data.
pub const REPORTED_BASE: [f64; 6] = [0.925, 0.831, 0.821, 0.829, 0.700, 0.899];
pub const REPORTED_TUNED: [f64; 6] = [0.930, 0.831, 0.860, 0.835, 0.700, 0.900];

/// Brackets from the textbook floating-point recurrence:
/// `s_max = ⌊log_η R⌋`, `n = ⌈(s_max+1)/(s+1) · η^s⌉`, `n_i = ⌊n η^-i⌋`,
/// `r_i = ⌈R η^(i-s)⌉`.
pub fn hyperband_oracle(r: u32, eta: u32) -> Vec<Vec<(usize, u32)>> {
    let (rf, ef) = (r as f64, eta as f64);
    let s_max = (rf.ln() / ef.ln() + 1e-9).floor() as i32;
    let mut out = Vec::new();
    for s in (0..=s_max).rev() {
        let n = ((s_max + 1) as f64 / (s + 1) as f64 * ef.powi(s) - 1e-9).ceil();
        let rounds = (0..=s)
            .map(|i| {
                let n_i = (n * ef.powi(-i) + 1e-9).floor() as usize;
                let r_i = (rf * ef.powi(i - s) - 1e-9).ceil().max(1.0) as u32;
                (n_i, r_i)
            })
            .collect();
        out.push(rounds);
    }
    out
}

pub fn describe_plan(p: &headsearch::hyperband::HyperbandPlan) -> String {
    p.brackets
        .iter()
        .map(|b| {
            let rounds: Vec<String> = b.rounds.iter().map(|r| format!("{}@{}", r.configs, r.budget)).collect();
            format!("({})", rounds.join("→"))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Scores configs without training: prefers max pooling and wide conv
/// stacks, and improves with budget.
pub struct StubEvaluator;

impl headsearch::hyperband::Evaluator for StubEvaluator {
    fn evaluate(&self, config: &HeadConfig, budget_epochs: u32, seed: u64) -> Result<headsearch::trainer::Trial> {
        let v = headsearch::searchspace::encode(config).values;
        let acc = (0.4 + 0.3 * (1.0 - v[0]) + 0.2 * v[5] + 0.01 * budget_epochs as f64).min(1.0);
        Ok(headsearch::trainer::Trial {
            trial_id: 0,
            config: *config,
            budget_epochs,
            seed,
            val_acc: acc,
            test_acc: acc,
            train_steps: budget_epochs as u64,
            wall_ms: 0,
            bracket: None,
            rung: None,
        })
    }
}

/// A full Hyperband search with density-ratio proposals over the stub
/// evaluator; returns the trials and the JSON lines the sink received.
pub fn stub_search(r: u32, eta: u32, seed: u64) -> (Vec<headsearch::trainer::Trial>, Vec<String>) {
    use headsearch::bohb::{BohbSampler, SamplerParams};
    use headsearch::hyperband::{run_search, SearchState};
    let p = headsearch::hyperband::plan(r, eta).unwrap();
    let mut sampler = BohbSampler::new(SamplerParams::default(), 32).unwrap();
    let mut lines = Vec::new();
    let trials = {
        let sink = |t: &headsearch::trainer::Trial| {
            lines.push(serde_json::to_string(t)?);
            Ok(())
        };
        let mut state = SearchState::new(seed, 1, sink).unwrap();
        run_search(&p, &mut sampler, &StubEvaluator, &mut state).unwrap()
    };
    (trials, lines)
}

/// 200 uniformly drawn configs at budget 1, scored 1 when the MLP hidden
/// width lies in [150, 200] and 0 otherwise.
pub fn planted_store(seed: u64) -> headsearch::bohb::ObservationStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = headsearch::bohb::ObservationStore::new();
    for _ in 0..200 {
        let c = headsearch::searchspace::sample_uniform(&mut rng, 32);
        let good = c.mlp.hidden.is_some_and(|h| (150..=200).contains(&h));
        store.push(1, headsearch::searchspace::encode(&c), if good { 1.0 } else { 0.0 });
    }
    store
}

/// The region proposals are scored against: hidden width at least 140.
pub fn in_planted_region(c: &HeadConfig) -> bool {
    c.mlp.layers > 1 && c.mlp.hidden.is_some_and(|h| h >= 140)
}

/// Probability that a uniform draw lands in the region: four of five
/// depths carry a width, and 61 of the 196 widths are at least 140.
pub fn planted_null_rate() -> f64 {
    0.8 * 61.0 / 196.0
}

/// Proposals in the planted region out of 200, drawn from one rng.
pub fn planted_concentration(params: headsearch::bohb::SamplerParams, seed: u64) -> (usize, usize) {
    let sampler = headsearch::bohb::BohbSampler::with_store(params, 32, planted_store(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let n = 200;
    let hits = (0..n).filter(|_| in_planted_region(&sampler.propose(&mut rng))).count();
    (hits, n)
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`, summed in log space.
pub fn binomial_upper_tail(n: usize, k: usize, p: f64) -> f64 {
    let ln_fact = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    (k..=n)
        .map(|i| {
            let ln_choose = ln_fact(n) - ln_fact(i) - ln_fact(n - i);
            (ln_choose + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp()
        })
        .sum()
}

fn fake_trial(id: u64, config: HeadConfig, budget: u32, val: f64, test: f64) -> headsearch::trainer::Trial {
    headsearch::trainer::Trial {
        trial_id: id,
        config,
        budget_epochs: budget,
        seed: id,
        val_acc: val,
        test_acc: test,
        train_steps: 0,
        wall_ms: 0,
        bracket: Some(0),
        rung: Some(0),
    }
}

fn fake_record(kind: headsearch::run::RunKind, task: &str, budget: u32, config: HeadConfig) -> headsearch::run::RunRecord {
    headsearch::run::RunRecord {
        run_id: format!("{kind:?}-{task}").to_lowercase(),
        kind,
        task: task.to_string(),
        task_source: format!("tsv:{task}.tsv"),
        small: false,
        seed: 0,
        data_seed: 0,
        budget_max: budget,
        eta: None,
        parallel: 1,
        train: Default::default(),
        sampler: None,
        weights: "weights/base.hsw".into(),
        trials: None,
        best_config: Some(config),
    }
}

/// Writes one baseline and one search run directory per task under
/// `root`, with the given test accuracies. Each search also holds a
/// better-looking trial at a lower budget that the report must ignore.
pub fn write_runs(root: &std::path::Path, tasks: &[&str], base: &[f64], tuned: &[f64], configs: &[HeadConfig]) {
    use headsearch::run::{RunKind, BASELINE_FILE, SETTINGS_FILE, TRIALS_FILE};
    let write = |p: std::path::PathBuf, text: String| std::fs::write(p, text).unwrap();
    for (i, task) in tasks.iter().enumerate() {
        let b = root.join(format!("baseline-{task}"));
        std::fs::create_dir_all(&b).unwrap();
        let baseline = headsearch::searchspace::baseline_config();
        write(b.join(BASELINE_FILE), serde_json::to_string_pretty(&fake_trial(0, baseline, 5, 0.5, base[i])).unwrap());
        write(
            b.join(SETTINGS_FILE),
            serde_json::to_string_pretty(&fake_record(RunKind::Baseline, task, 5, baseline)).unwrap(),
        );

        let s = root.join(format!("search-{task}"));
        std::fs::create_dir_all(&s).unwrap();
        let trials = [
            fake_trial(0, baseline, 1, 0.99, 0.0),
            fake_trial(1, configs[i], 9, 0.8, tuned[i]),
            fake_trial(2, baseline, 9, 0.8, 0.0),
        ];
        let lines: String = trials.iter().map(|t| serde_json::to_string(t).unwrap() + "\n").collect();
        write(s.join(TRIALS_FILE), lines);
        let mut record = fake_record(RunKind::Search, task, 9, configs[i]);
        record.trials = Some(TRIALS_FILE.into());
        write(s.join(SETTINGS_FILE), serde_json::to_string_pretty(&record).unwrap());
    }
}

/// Bin representatives of a width range: ten evenly spread integers.
fn width_bins() -> Vec<u32> {
    (0..10).map(|i| 5 + (i * 195) / 9).collect()
}

/// Walks every discretized configuration, checking that each component's
/// options are pairwise distinct, and counts them.
pub fn enumerate_space(conv_optional: bool) -> u64 {
    let mlps: Vec<MlpSpec> = (1..=5u32)
        .flat_map(|l| width_bins().into_iter().map(move |h| (l, h)))
        // The convention counts all ten width bins even for a single layer,
        // so keep the bin on those points to make them distinct.
        .map(|(l, h)| if l == 1 { MlpSpec { layers: 1, hidden: Some(h) } } else { MlpSpec::deep(l, h) })
        .collect();
    let mut convs: Vec<ConvSpec> = if conv_optional { vec![ConvSpec::disabled()] } else { vec![] };
    for h in width_bins() {
        for k in [3, 5, 7, 9, 11] {
            for l in 1..=5 {
                for s in [false, true] {
                    convs.push(ConvSpec::new(h, k, l, s));
                }
            }
        }
    }
    let mut encoders = vec![EncoderSpec::disabled()];
    for h in 1..=16 {
        for l in 1..=5 {
            encoders.push(EncoderSpec::new(h, l));
        }
    }
    assert_eq!(mlps.iter().collect::<std::collections::HashSet<_>>().len(), mlps.len());
    assert_eq!(convs.iter().collect::<std::collections::HashSet<_>>().len(), convs.len());
    assert_eq!(encoders.iter().collect::<std::collections::HashSet<_>>().len(), encoders.len());

    let mut count = 0u64;
    for pooling in PoolingKind::ALL {
        for freeze_base in [false, true] {
            for mlp in &mlps {
                for conv in &convs {
                    for encoder in &encoders {
                        let c = HeadConfig { pooling, freeze_base, mlp: *mlp, conv: *conv, encoder: *encoder };
                        std::hint::black_box(&c);
                        count += 1;
                    }
                }
            }
        }
    }
    count
}

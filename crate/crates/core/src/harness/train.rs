//! From-scratch training, adaptor-only fine-tuning, linear probing and
//! booster-style continued training of the toy backbone.

use std::path::Path;
use std::time::Instant;

use super::config::{DataConfig, RunConfig, TrainConfig};
use super::data::{gen_dataset, Dataset};
use super::report::{fmt_f, RunReport, Table};
use crate::error::{Error, Result};
use crate::grad::{AdamW, ParamGroup, ParamStore, Tape, Var};
use crate::model::{AdaptorInit, Backbone, BlockConfig, Insertion};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Precision, Tensor};

const STREAM_INIT: u64 = 0;
const STREAM_SOURCE: u64 = 3;
const STREAM_ADAPTED: u64 = 4;
const STREAM_BATCH: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub loss: f64,
    pub accuracy: f64,
}

/// Result of one optimization phase.
#[derive(Clone, Debug)]
pub struct Phase {
    pub trace: Vec<StepRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl Phase {
    pub fn loss_reduction(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss
    }

    fn report_into(&self, r: &mut RunReport, title: &str) {
        r.kv("initial_loss", fmt_f(self.initial_loss));
        r.kv("final_loss", fmt_f(self.final_loss));
        r.kv("loss_reduction", fmt_f(self.loss_reduction()));
        r.kv("train_accuracy", fmt_f(self.train_accuracy));
        r.kv("test_accuracy", fmt_f(self.test_accuracy));
        let mut t = Table::new(title, &["step", "loss", "batch_accuracy"]);
        for (i, s) in self.trace.iter().enumerate() {
            t.push(vec![(i + 1).to_string(), fmt_f(s.loss), fmt_f(s.accuracy)]);
        }
        r.tables.push(t);
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Backbone,
    pub phase: Phase,
    pub booster: Option<(Backbone, Phase)>,
}

pub struct FinetuneOutcome {
    pub report: RunReport,
    pub base: Backbone,
    pub model: Backbone,
    pub phase: Phase,
    pub trainable: usize,
    pub total: usize,
    /// Largest `|adapted − base|` logit gap on the test split before any
    /// update.
    pub step0_deviation: f64,
    pub probe: Option<Phase>,
}

impl FinetuneOutcome {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn load_data(cfg: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    if let Some(dir) = &cfg.dir {
        let all = Dataset::load_dir(dir)?;
        let n = cfg.train_samples.min(all.len());
        let idx: Vec<usize> = (0..all.len()).collect();
        return Ok((all.subset(&idx[..n]), all.subset(&idx[n..])));
    }
    let (tr, te) = cfg.specs(seed);
    Ok((gen_dataset(&tr)?, gen_dataset(&te)?))
}

/// Mean cross-entropy and accuracy of `forward` over `data`.
pub fn evaluate_with<F>(store: &ParamStore, data: &Dataset, mut forward: F) -> Result<(f64, f64)>
where
    F: FnMut(&mut Tape, &ParamStore, &Tensor) -> Result<Var>,
{
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut hits) = (0.0, 0usize);
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let mut tape = Tape::new();
        let z = forward(&mut tape, store, x)?;
        hits += (argmax(tape.value(z).data()) == y) as usize;
        let ce = tape.cross_entropy(z, y)?;
        loss += tape.value(ce).item();
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

pub fn evaluate(model: &Backbone, data: &Dataset) -> Result<(f64, f64)> {
    evaluate_with(&model.store, data, |t, s, x| {
        let x = t.leaf(x.clone());
        model.logits_tape(t, s, x)
    })
}

/// Minibatch AdamW on mean cross-entropy. Batches walk a fresh shuffle of
/// the data each epoch; a batch at least as large as the data is the whole
/// set in order.
pub fn fit<F>(
    store: &mut ParamStore,
    opt: &mut AdamW,
    data: &Dataset,
    steps: usize,
    batch: usize,
    seed: u64,
    nan_dump: Option<&Path>,
    mut forward: F,
) -> Result<Vec<StepRecord>>
where
    F: FnMut(&mut Tape, &ParamStore, &Tensor) -> Result<Var>,
{
    if data.is_empty() && steps > 0 {
        return Err(Error::Config("no training samples".into()));
    }
    let n = data.len();
    let mut rng = SplitMix64::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx: Vec<usize> = if batch >= n {
            (0..n).collect()
        } else {
            (0..batch)
                .map(|_| {
                    if cursor == n {
                        rng.shuffle(&mut order);
                        cursor = 0;
                    }
                    cursor += 1;
                    order[cursor - 1]
                })
                .collect()
        };
        store.zero_grads();
        let scale = 1.0 / idx.len() as f64;
        let (mut loss, mut hits) = (0.0, 0usize);
        for &i in &idx {
            let mut tape = Tape::new();
            let result = (|| {
                let z = forward(&mut tape, store, &data.inputs[i])?;
                hits += (argmax(tape.value(z).data()) == data.labels[i]) as usize;
                let ce = tape.cross_entropy(z, data.labels[i])?;
                let l = tape.value(ce).item();
                if !l.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                loss += l * scale;
                let scaled = tape.scale(ce, scale)?;
                tape.backward(scaled)?.accumulate(store)
            })();
            if let Err(e) = result {
                if let (Error::NonFinite(_), Some(dir)) = (&e, nan_dump) {
                    let bad = data.subset(&idx);
                    bad.save_dir(dir.join(format!("nan_batch_step{step}")), Precision::F64)?;
                }
                return Err(e);
            }
        }
        opt.step(store);
        trace.push(StepRecord {
            loss,
            accuracy: hits as f64 * scale,
        });
    }
    Ok(trace)
}

fn fit_model(
    model: &mut Backbone,
    cfg: &TrainConfig,
    steps: usize,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    nan_dump: Option<&Path>,
) -> Result<Phase> {
    let (initial_loss, _) = evaluate(model, train)?;
    let mut store = std::mem::take(&mut model.store);
    let mut opt = AdamW::new(cfg.optimizer, &store);
    let m = &*model;
    let trace = fit(&mut store, &mut opt, train, steps, cfg.batch, seed, nan_dump, |t, s, x| {
        let x = t.leaf(x.clone());
        m.logits_tape(t, s, x)
    });
    model.store = store;
    let trace = trace?;
    let (final_loss, train_accuracy) = evaluate(model, train)?;
    let (_, test_accuracy) = evaluate(model, test)?;
    Ok(Phase {
        trace,
        initial_loss,
        final_loss,
        train_accuracy,
        test_accuracy,
    })
}

fn count_into(r: &mut RunReport, store: &ParamStore) {
    let (tr, tot) = (store.trainable_count(), store.total_count());
    r.kv("trainable_params", tr);
    r.kv("total_params", tot);
    r.kv("trainable_fraction", fmt_f(tr as f64 / tot as f64));
}

fn optimizer_line(cfg: &TrainConfig) -> String {
    let o = &cfg.optimizer;
    format!(
        "adamw lr={} beta1={} beta2={} eps={} weight_decay={} batch={}",
        o.lr, o.beta1, o.beta2, o.eps, o.weight_decay, cfg.batch
    )
}

fn adaptor_free(block: &BlockConfig) -> BlockConfig {
    BlockConfig {
        adaptor_t: None,
        adaptor_s: None,
        insertion: Insertion::None,
        ..block.clone()
    }
}

/// Base block with the fine-tuning adaptors wired in.
fn adapted_block(cfg: &RunConfig) -> Result<BlockConfig> {
    let ft = &cfg.finetune;
    if ft.insertion == Insertion::Sequential {
        return Err(Error::Config(
            "sequential insertion rewires the frozen base; fine-tuning needs parallel".into(),
        ));
    }
    if ft.insertion == Insertion::None || (ft.adaptor_t.is_none() && ft.adaptor_s.is_none()) {
        return Err(Error::Config("fine-tuning needs parallel adaptors".into()));
    }
    let mut b = adaptor_free(&cfg.block);
    b.adaptor_t = ft.adaptor_t.clone();
    b.adaptor_s = ft.adaptor_s.clone();
    if let Some(s) = b.adaptor_s.as_mut() {
        s.residual = None;
    }
    b.insertion = Insertion::Parallel;
    b.adaptor_init = ft.init;
    b.validate()?;
    Ok(b)
}

/// Builds the adapted model around a base, copying every base parameter.
fn adapt(cfg: &RunConfig, base: &Backbone, stream: u64) -> Result<Backbone> {
    let mut m = Backbone::new(
        cfg.backbone.clone(),
        adapted_block(cfg)?,
        &mut SplitMix64::new(derive_seed(cfg.seed, stream)),
    )?;
    let copied = m.store.load_matching(&base.store)?;
    if copied != base.store.len() {
        return Err(Error::Contract(format!(
            "adapted model matched {copied} of {} base parameters",
            base.store.len()
        )));
    }
    Ok(m)
}

pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.train.booster_steps > 0 && cfg.block.insertion != Insertion::None {
        return Err(Error::Config("booster training starts from an adaptor-free block".into()));
    }
    let t0 = Instant::now();
    let (train_set, test_set) = load_data(&cfg.data, cfg.seed)?;
    let mut model = Backbone::new(
        cfg.backbone.clone(),
        cfg.block.clone(),
        &mut SplitMix64::new(derive_seed(cfg.seed, STREAM_INIT)),
    )?;
    let mut r = RunReport::new("train", cfg.seed);
    r.time("setup", t0.elapsed());
    let t1 = Instant::now();
    let phase = fit_model(
        &mut model,
        &cfg.train,
        cfg.train.steps,
        &train_set,
        &test_set,
        derive_seed(cfg.seed, STREAM_BATCH),
        out,
    )?;
    r.time("train", t1.elapsed());
    r.kv("optimizer", optimizer_line(&cfg.train));
    r.kv("steps", cfg.train.steps);
    count_into(&mut r, &model.store);
    phase.report_into(&mut r, "loss trace");

    let booster = if cfg.train.booster_steps > 0 {
        let t2 = Instant::now();
        let mut boosted = adapt(cfg, &model, STREAM_ADAPTED)?;
        let b = fit_model(
            &mut boosted,
            &cfg.train,
            cfg.train.booster_steps,
            &train_set,
            &test_set,
            derive_seed(cfg.seed, STREAM_BATCH + 1),
            out,
        )?;
        r.time("booster", t2.elapsed());
        let mut br = RunReport::new("booster", cfg.seed);
        br.kv("steps", cfg.train.booster_steps);
        count_into(&mut br, &boosted.store);
        b.report_into(&mut br, "booster loss trace");
        r.absorb("booster", br);
        Some((boosted, b))
    } else {
        None
    };
    r.kv("config", cfg.to_toml());
    Ok(TrainOutcome {
        report: r,
        model,
        phase,
        booster,
    })
}

/// Trains only the head on frozen features of `base`.
pub fn linear_probe(
    cfg: &RunConfig,
    base: &Backbone,
    train: &Dataset,
    test: &Dataset,
) -> Result<Phase> {
    let featurize = |d: &Dataset| -> Result<Dataset> {
        Ok(Dataset {
            inputs: d.inputs.iter().map(|x| base.features(x)).collect::<Result<_>>()?,
            labels: d.labels.clone(),
        })
    };
    let (ftr, fte) = (featurize(train)?, featurize(test)?);
    let mut store = base.store.clone();
    store.set_trainable(|g| g == ParamGroup::Head);
    let head = |t: &mut Tape, s: &ParamStore, f: &Tensor| {
        let f = t.leaf(f.clone());
        base.head_tape(t, s, f)
    };
    let (initial_loss, _) = evaluate_with(&store, &ftr, head)?;
    let mut opt = AdamW::new(cfg.train.optimizer, &store);
    let trace = fit(
        &mut store,
        &mut opt,
        &ftr,
        cfg.train.steps,
        cfg.train.batch,
        derive_seed(cfg.seed, STREAM_BATCH + 2),
        None,
        head,
    )?;
    let (final_loss, train_accuracy) = evaluate_with(&store, &ftr, head)?;
    let (_, test_accuracy) = evaluate_with(&store, &fte, head)?;
    Ok(Phase {
        trace,
        initial_loss,
        final_loss,
        train_accuracy,
        test_accuracy,
    })
}

/// Pretrains (or loads) an adaptor-free base, inserts zero-initialized
/// parallel adaptors and trains only adaptors and head on the target task.
pub fn finetune(cfg: &RunConfig, base_store: Option<&ParamStore>, out: Option<&Path>) -> Result<FinetuneOutcome> {
    let adapted_cfg = adapted_block(cfg)?;
    let base_cfg = RunConfig {
        block: adaptor_free(&cfg.block),
        ..cfg.clone()
    };
    base_cfg.validate()?;
    RunConfig {
        data: cfg.finetune.source.clone(),
        ..base_cfg.clone()
    }
    .validate()?;
    let mut r = RunReport::new("finetune", cfg.seed);
    let t0 = Instant::now();
    let mut base = Backbone::new(
        cfg.backbone.clone(),
        base_cfg.block.clone(),
        &mut SplitMix64::new(derive_seed(cfg.seed, STREAM_INIT)),
    )?;
    match base_store {
        Some(s) => {
            if s.len() != base.store.len() || base.store.load_matching(s)? != s.len() {
                return Err(Error::Config(
                    "base checkpoint does not match the adaptor-free backbone".into(),
                ));
            }
            r.kv("base", "checkpoint");
        }
        None => {
            let (src_train, src_test) = load_data(&cfg.finetune.source, derive_seed(cfg.seed, STREAM_SOURCE))?;
            let pre = fit_model(
                &mut base,
                &cfg.train,
                cfg.finetune.pretrain_steps,
                &src_train,
                &src_test,
                derive_seed(cfg.seed, STREAM_BATCH + 3),
                out,
            )?;
            r.kv("base", "pretrained");
            r.kv("pretrain.steps", cfg.finetune.pretrain_steps);
            r.kv("pretrain.final_loss", fmt_f(pre.final_loss));
            r.kv("pretrain.test_accuracy", fmt_f(pre.test_accuracy));
        }
    }
    r.time("base", t0.elapsed());

    let (train_set, test_set) = load_data(&cfg.data, cfg.seed)?;
    let mut model = adapt(cfg, &base, STREAM_ADAPTED)?;
    debug_assert_eq!(model.block, adapted_cfg);
    model.store.set_trainable(|g| g != ParamGroup::Backbone);
    let mut step0_deviation: f64 = 0.0;
    for x in &test_set.inputs {
        step0_deviation = step0_deviation.max(model.logits(x)?.max_abs_diff(&base.logits(x)?));
    }
    if cfg.finetune.init == AdaptorInit::Zero && step0_deviation > 1e-12 {
        return Err(Error::Contract(format!(
            "zero-initialized adaptors moved the base output by {step0_deviation:e}"
        )));
    }
    let (trainable, total) = (model.store.trainable_count(), model.store.total_count());
    let t1 = Instant::now();
    let phase = fit_model(
        &mut model,
        &cfg.train,
        cfg.train.steps,
        &train_set,
        &test_set,
        derive_seed(cfg.seed, STREAM_BATCH),
        out,
    )?;
    r.time("finetune", t1.elapsed());
    r.kv("optimizer", optimizer_line(&cfg.train));
    r.kv("steps", cfg.train.steps);
    count_into(&mut r, &model.store);
    r.kv("step0_max_deviation", format!("{step0_deviation:e}"));
    phase.report_into(&mut r, "finetune loss trace");

    let probe = if cfg.finetune.probe {
        let t2 = Instant::now();
        let p = linear_probe(cfg, &base, &train_set, &test_set)?;
        r.time("probe", t2.elapsed());
        let mut pr = RunReport::new("probe", cfg.seed);
        let mut head_only = base.store.clone();
        head_only.set_trainable(|g| g == ParamGroup::Head);
        count_into(&mut pr, &head_only);
        p.report_into(&mut pr, "probe loss trace");
        r.absorb("probe", pr);
        Some(p)
    } else {
        None
    };
    r.kv("config", cfg.to_toml());
    Ok(FinetuneOutcome {
        report: r,
        base,
        model,
        phase,
        trainable,
        total,
        step0_deviation,
        probe,
    })
}

//! Per-model synth / train / eval drivers behind the command line.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use ssvi_core::ctm::{self, CovMode, CtmModel, CtmTrainer, NllScheme, Structure};
use ssvi_core::data::{self, CorpusData, DesignData, TripletData, ZScore};
use ssvi_core::expfam::GaussianDist;
use ssvi_core::glm::{self, GlmModel, GlmTrainer};
use ssvi_core::gme::{self, Bound, GmeModel, GmePosterior, GmeTrainer, MeanFieldState, Sampling};
use ssvi_core::likelihoods::{Expectation, Likelihood, DEFAULT_QUADRATURE_POINTS};
use ssvi_core::linalg::Matrix;
use ssvi_core::pmf::{self, PmfState, PmfTrainer, Terms};
use ssvi_core::quadrature::GaussHermite;
use ssvi_core::rng;
use ssvi_core::sgp::{self, Blocks, KernelSpec, Method, SgpState};
use ssvi_core::synth;

use crate::config::{ConfigError, Settings};
use crate::io::{self, IoError};
use crate::trace::{TraceError, TraceWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelKind {
    Glm,
    Gme,
    Sgp,
    Pmf,
    Ctm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Verb {
    Synth,
    Train,
    Eval,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Input(#[from] IoError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("model failure: {0}")]
    Model(#[from] ssvi_core::Error),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Output(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl RunError {
    /// 2 for bad invocations and unreadable inputs, 1 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Input(_) | RunError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Input(_) => "input",
            RunError::Trace(_) => "trace",
            RunError::Model(_) => "model",
            RunError::Json(_) => "model_file",
            RunError::Output(_) => "output",
            RunError::Usage(_) => "usage",
        }
    }

    /// Machine-readable record for stderr.
    pub fn record(&self) -> serde_json::Value {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() } })
    }
}

pub type RunResult<T> = Result<T, RunError>;

/// Everything `eval` needs to score new data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SavedModel {
    Glm { model: GlmModel, posterior: GaussianDist, zscore: ZScore },
    Gme { model: GmeModel, posterior: GmePosterior, zscore: ZScore },
    Sgp { states: Vec<(String, SgpState)> },
    Pmf { likelihood: Likelihood, state: PmfState },
    Ctm { models: Vec<(String, CtmModel)> },
}

/// Outcome of a successful command: files written and metrics printed.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Report {
    pub written: Vec<PathBuf>,
    pub metrics: Vec<serde_json::Value>,
}

const DEFAULT_EVAL_SEED: u64 = 0xe7a1;

pub fn run(model: ModelKind, verb: Verb, s: &Settings) -> RunResult<Report> {
    match (model, verb) {
        (_, Verb::Synth) => synth(model, s),
        (ModelKind::Glm, Verb::Train) => train_glm(s),
        (ModelKind::Gme, Verb::Train) => train_gme(s),
        (ModelKind::Sgp, Verb::Train) => train_sgp(s),
        (ModelKind::Pmf, Verb::Train) => train_pmf(s),
        (ModelKind::Ctm, Verb::Train) => train_ctm(s),
        (_, Verb::Eval) => eval(model, s),
    }
}

fn out_path(s: &Settings) -> RunResult<PathBuf> {
    Ok(s.require_path("out")?)
}

fn synth(model: ModelKind, s: &Settings) -> RunResult<Report> {
    let seed = s.seed()?;
    let out = out_path(s)?;
    match model {
        ModelKind::Glm => {
            let lik = s.likelihood(Likelihood::Logistic)?;
            let (d, _) = synth::synth_glm(s.get_or("dim", 5)?, s.get_or("n", 1000)?, &lik, seed)?;
            io::save_libsvm(&out, &d)?;
        }
        ModelKind::Gme => {
            let lik = s.likelihood(Likelihood::PoissonLogistic { rate_max: ssvi_core::likelihoods::DEFAULT_RATE_MAX })?;
            let tau: f64 = s.get_or("tau", gme::DEFAULT_TAU)?;
            let (d, _, _) = synth::synth_gme(s.get_or("dim", 5)?, s.get_or("n", 500)?, &lik, tau * tau, seed)?;
            io::save_libsvm(&out, &d)?;
        }
        ModelKind::Sgp => {
            let kernel = kernel_setting(s)?.unwrap_or(KernelSpec::new(1.0, 1.0, 0.1)?);
            let d = synth::synth_sgp(s.get_or("n", 400)?, &kernel, -5.0, 5.0, seed)?;
            io::save_table(&out, &d)?;
        }
        ModelKind::Pmf => {
            let lik = s.likelihood(Likelihood::Gaussian { variance: 1.0 })?;
            let t = synth::synth_pmf(s.get_or("rows", 100)?, s.get_or("cols", 100)?, s.get_or("rank", 5)?, &lik, s.get_or("density", 1.0)?, seed)?;
            io::save_triplets(&out, &t)?;
        }
        ModelKind::Ctm => {
            let truth = synth::random_ctm_model(s.get_or("topics", 5)?, s.get_or("vocab", 200)?, s.get_or("concentration", 0.1)?, seed)?;
            let c = synth::synth_ctm(&truth, s.get_or("docs", 100)?, s.get_or("words", 50)?, rng::mix(seed, 1))?;
            io::save_bow(&out, &c)?;
        }
    }
    Ok(Report { written: vec![out], metrics: vec![] })
}

fn kernel_setting(s: &Settings) -> RunResult<Option<KernelSpec>> {
    let Some(raw) = s.raw("kernel") else { return Ok(None) };
    let parts: Vec<f64> = raw.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad("kernel", raw, "expected three numbers"))?;
    if parts.len() != 3 {
        return Err(bad("kernel", raw, "expected LENGTH,SIGNAL_VAR,NOISE_VAR"));
    }
    Ok(Some(KernelSpec::new(parts[0], parts[1], parts[2])?))
}

fn bad(key: &str, value: &str, msg: &str) -> RunError {
    RunError::Config(ConfigError::Invalid { key: key.into(), value: value.into(), msg: msg.into() })
}

/// Training and test design matrices, z-scored on the training features.
fn load_design(s: &Settings) -> RunResult<(DesignData, DesignData, ZScore)> {
    let all = io::read_libsvm(&s.require_path("data")?, None)?;
    let (train, test) = match s.path("test-data") {
        Some(t) => {
            let test = io::read_libsvm(&t, Some(all.dim()))?;
            (all, test)
        }
        None => {
            let (a, b) = data::split_80_20(all.len(), s.seed()?)?;
            (all.subset(&a), all.subset(&b))
        }
    };
    let (xtr, xte, z) = data::zscore_fit_apply(&train.x, &test.x)?;
    Ok((DesignData::new(xtr, train.y)?, DesignData::new(xte, test.y)?, z))
}

fn load_triplets(s: &Settings) -> RunResult<(TripletData, TripletData)> {
    let all = io::read_triplets(&s.require_path("data")?)?;
    match s.path("test-data") {
        Some(t) => Ok((all, io::read_triplets(&t)?)),
        None => {
            let (a, b) = data::split_80_20(all.len(), s.seed()?)?;
            Ok((all.subset(&a), all.subset(&b)))
        }
    }
}

fn load_corpus(s: &Settings) -> RunResult<(CorpusData, CorpusData)> {
    let all = io::read_bow(&s.require_path("data")?)?;
    let (train, test) = match s.path("test-data") {
        Some(t) => (all, io::read_bow(&t)?),
        None => {
            let (a, b) = data::split_80_20(all.len(), s.seed()?)?;
            (all.subset(&a), all.subset(&b))
        }
    };
    let test = data::filter_test_vocab(&train, &test);
    Ok((train, test))
}

fn save_model(s: &Settings, model: &SavedModel, report: &mut Report) -> RunResult<()> {
    if let Some(p) = s.path("save") {
        serde_json::to_writer_pretty(BufWriter::new(File::create(&p)?), model)?;
        report.written.push(p);
    }
    Ok(())
}

fn trace_writer(s: &Settings, report: &mut Report) -> RunResult<TraceWriter> {
    let out = out_path(s)?;
    let w = TraceWriter::create(&out, s.clock()?)?;
    report.written.push(out);
    Ok(w)
}

fn gh() -> RunResult<Expectation> {
    Ok(Expectation::gauss_hermite(DEFAULT_QUADRATURE_POINTS)?)
}

fn eval_seed(s: &Settings) -> RunResult<u64> {
    Ok(s.get_or("eval-seed", DEFAULT_EVAL_SEED)?)
}

fn train_glm(s: &Settings) -> RunResult<Report> {
    let lik = s.likelihood(Likelihood::Logistic)?;
    let cfg = s.train_config()?;
    let (iters, every) = s.cadence(1000)?;
    let (train, test, zscore) = load_design(s)?;
    let model = GlmModel::standard(train.dim(), lik)?;
    let mut tr = GlmTrainer::new(model, train.len(), &cfg)?;
    let est = Expectation::monte_carlo(cfg.mc_samples, eval_seed(s)?)?;
    let quad = gh()?;
    let mut report = Report::default();
    let mut out = trace_writer(s, &mut report)?;
    let notes = format!("engine={}", cfg.engine.name());
    let row = |tr: &GlmTrainer, out: &mut TraceWriter| -> RunResult<()> {
        let vlb = glm::glm_vlb(&tr.model, tr.posterior(), &train, &est)?;
        let ev = glm::evaluate(&tr.model, tr.posterior(), &test, &quad)?;
        out.write(tr.epoch(), tr.iteration(), Some(-vlb.value), Some(ev.nll), Some(ev.error), &notes)?;
        Ok(())
    };
    row(&tr, &mut out)?;
    for t in 1..=iters {
        tr.step(&train)?;
        if t % every == 0 || t == iters {
            row(&tr, &mut out)?;
        }
    }
    save_model(s, &SavedModel::Glm { model: tr.model.clone(), posterior: tr.posterior().clone(), zscore }, &mut report)?;
    Ok(report)
}

enum GmeRun {
    Stochastic(GmeTrainer),
    MeanField(MeanFieldState, u64),
}

fn train_gme(s: &Settings) -> RunResult<Report> {
    let lik = s.likelihood(Likelihood::PoissonLogistic { rate_max: ssvi_core::likelihoods::DEFAULT_RATE_MAX })?;
    let cfg = s.train_config()?;
    let (iters, every) = s.cadence(200)?;
    let bound = s.raw("bound").unwrap_or("optimal").to_string();
    let n_inner = s.get_or("inner-samples", gme::DEFAULT_INNER_SAMPLES)?;
    let tau: f64 = s.get_or("tau", gme::DEFAULT_TAU)?;
    let (train, test, zscore) = load_design(s)?;
    let model = GmeModel::new(GaussianDist::standard(train.dim())?, tau * tau, lik)?;
    let mut run = match bound.as_str() {
        "optimal" => GmeRun::Stochastic(GmeTrainer::new(model.clone(), Bound::Optimal, train.len(), &cfg, n_inner)?),
        "suboptimal" => GmeRun::Stochastic(GmeTrainer::new(model.clone(), Bound::Suboptimal, train.len(), &cfg, n_inner)?),
        "meanfield" => GmeRun::MeanField(MeanFieldState::new(model.initial_posterior()?, &train), 0),
        other => return Err(bad("bound", other, "expected optimal, suboptimal or meanfield")),
    };
    let eval_bound = if bound == "suboptimal" { Bound::Suboptimal } else { Bound::Optimal };
    let sampling = Sampling::monte_carlo(gme::DEFAULT_OUTER_SAMPLES, n_inner, eval_seed(s)?)?;
    let mc = Expectation::monte_carlo(cfg.mc_samples, eval_seed(s)?)?;
    let (outer, inner) = (GaussHermite::new(gme::PREDICT_POINTS)?, gh()?);
    let mut report = Report::default();
    let mut out = trace_writer(s, &mut report)?;
    let notes = format!("bound={bound};engine={}", cfg.engine.name());
    let row = |run: &GmeRun, out: &mut TraceWriter| -> RunResult<()> {
        let (post, vlb, epoch, it) = match run {
            GmeRun::Stochastic(tr) => (tr.posterior(), gme::vlb(&model, tr.posterior(), &train, eval_bound, &sampling)?, tr.epoch(), tr.iteration()),
            GmeRun::MeanField(st, it) => (&st.post, st.vlb(&model, &train, &mc)?, *it, *it),
        };
        let ev = gme::evaluate(&model, post, &test, &outer, &inner)?;
        out.write(epoch, it, Some(-vlb.value), Some(ev.nll), Some(ev.error), &notes)?;
        Ok(())
    };
    row(&run, &mut out)?;
    for t in 1..=iters {
        match &mut run {
            GmeRun::Stochastic(tr) => tr.step(&train)?,
            GmeRun::MeanField(st, it) => {
                st.pass(&model, &train, gme::MEANFIELD_INNER_ITERS, cfg.learning_rate, &mc.reseeded(t))?;
                *it = t;
            }
        }
        if t % every == 0 || t == iters {
            row(&run, &mut out)?;
        }
    }
    let posterior = match &run {
        GmeRun::Stochastic(tr) => tr.posterior().clone(),
        GmeRun::MeanField(st, _) => st.post.clone(),
    };
    save_model(s, &SavedModel::Gme { model, posterior, zscore }, &mut report)?;
    Ok(report)
}

fn sgp_methods(s: &Settings) -> RunResult<Vec<Method>> {
    let raw = s.raw("method").unwrap_or("all");
    if raw == "all" {
        return Ok(Method::ALL.to_vec());
    }
    raw.split(',').map(|m| Method::parse(m.trim()).ok_or_else(|| bad("method", raw, "expected suboptimal, optimal, v1, v2 or all"))).collect()
}

fn train_sgp(s: &Settings) -> RunResult<Report> {
    let methods = sgp_methods(s)?;
    let seed = s.seed()?;
    let path = s.require_path("data")?;
    let all = io::read_table(&path)?;
    let (train, test) = match s.path("test-data") {
        Some(t) => (all, io::read_table(&t)?),
        None => {
            let (a, b) = data::split_80_20(all.len(), seed)?;
            (all.subset(&a), all.subset(&b))
        }
    };
    let z = match s.raw("inducing").unwrap_or("20") {
        "all" => train.x.clone(),
        m => {
            let m: usize = m.parse().map_err(|_| bad("inducing", m, "expected a count or `all`"))?;
            let idx = rng::sample_without_replacement(&mut rng::stream(seed, 0x1d), train.len(), m.min(train.len()));
            Matrix::from_fn(idx.len(), train.dim(), |r, c| train.x[(idx[r], c)])
        }
    };
    let kernel = match kernel_setting(s)? {
        Some(k) => k,
        None => sgp::grid_search(&train.x, &train.y, &sgp::Grid::default())?,
    };
    let blocks = Blocks::new(&train.x, &z, kernel)?;
    let mut report = Report::default();
    let mut out = trace_writer(s, &mut report)?;
    let mut states = Vec::new();
    for m in methods {
        let st = sgp::solve(m, &blocks, &train.x, &train.y)?;
        let vlb = sgp::optimal_vlb(&blocks, &st, &train.x, &train.y)?;
        let ev = sgp::evaluate(&st, &test)?;
        let notes = format!(
            "method={};length_scale={};signal_var={};noise_var={}",
            m.name(),
            kernel.length_scale,
            kernel.signal_var,
            kernel.noise_var
        );
        out.write(0, 0, Some(-vlb), Some(ev.nll), Some(ev.error), &notes)?;
        report.metrics.push(serde_json::json!({ "method": m.name(), "test_nll": ev.nll, "mse": ev.error, "neg_vlb": -vlb }));
        states.push((m.name().to_string(), st));
    }
    save_model(s, &SavedModel::Sgp { states }, &mut report)?;
    Ok(report)
}

fn pmf_terms(s: &Settings, lik: &Likelihood) -> RunResult<Terms> {
    match s.raw("terms") {
        None => Ok(if matches!(lik, Likelihood::Gaussian { .. }) { Terms::Exact } else { Terms::default_mc() }),
        Some("mc") => Ok(Terms::default_mc()),
        Some("exact") => Ok(Terms::Exact),
        Some(other) => Err(bad("terms", other, "expected mc or exact")),
    }
}

fn train_pmf(s: &Settings) -> RunResult<Report> {
    let lik = s.likelihood(Likelihood::Gaussian { variance: 1.0 })?;
    let cfg = s.train_config()?;
    let rank = s.get_or("rank", 5)?;
    let terms = pmf_terms(s, &lik)?;
    let (train, test) = load_triplets(s)?;
    let (iters, every) = s.cadence(((train.rows + train.cols) * 20) as u64)?;
    let state = PmfState::initial(train.rows, train.cols, rank, cfg.seed)?;
    let mut tr = PmfTrainer::new(lik, state, &train, &cfg)?;
    tr.set_terms(terms)?;
    let quad = gh()?;
    let es = eval_seed(s)?;
    let mut report = Report::default();
    let mut out = trace_writer(s, &mut report)?;
    let row = |tr: &PmfTrainer, out: &mut TraceWriter| -> RunResult<()> {
        let vlb = pmf::vlb(&tr.lik, &tr.state, &train, terms, es)?;
        let ev = pmf::evaluate(&tr.lik, &tr.state, &test, &quad)?;
        let mut notes = format!("engine={}", cfg.engine.name());
        if let Some(sec) = ev.secondary {
            notes.push_str(&format!(";secondary_error={sec}"));
        }
        out.write(tr.epoch(), tr.iteration(), Some(-vlb.value), Some(ev.nll), Some(ev.error), &notes)?;
        Ok(())
    };
    row(&tr, &mut out)?;
    for t in 1..=iters {
        tr.step(&train)?;
        if t % every == 0 || t == iters {
            row(&tr, &mut out)?;
        }
    }
    save_model(s, &SavedModel::Pmf { likelihood: tr.lik, state: tr.state.clone() }, &mut report)?;
    Ok(report)
}

fn structures(s: &Settings) -> RunResult<Vec<Structure>> {
    match s.raw("approx").unwrap_or("optimal") {
        "optimal" => Ok(vec![Structure::Optimal]),
        "simple" => Ok(vec![Structure::Simple]),
        "both" => Ok(vec![Structure::Optimal, Structure::Simple]),
        other => Err(bad("approx", other, "expected optimal, simple or both")),
    }
}

fn structure_name(st: Structure) -> &'static str {
    match st {
        Structure::Optimal => "optimal",
        Structure::Simple => "simple",
    }
}

fn nll_scheme(s: &Settings) -> RunResult<NllScheme> {
    let raw = s.raw("nll-scheme").unwrap_or("posterior");
    NllScheme::ALL.into_iter().find(|k| k.name() == raw).ok_or_else(|| bad("nll-scheme", raw, "expected prior, posterior, posterior+0.1I or posterior+I"))
}

/// Mean normalized held-out NLL, and the mean split-half point score
/// (negated per-word log-likelihood) over documents with at least two words.
fn ctm_test_metrics(model: &CtmModel, test: &CorpusData, s: &Settings, n_mc: usize, seed: u64) -> RunResult<(Option<f64>, Option<f64>)> {
    let scheme = nll_scheme(s)?;
    let (samples, batches) = (s.get_or("nll-samples", 10_000)?, s.get_or("nll-batches", 10)?);
    let (mut nll, mut point, mut n_nll, mut n_point) = (0.0, 0.0, 0usize, 0usize);
    for (d, doc) in test.docs.iter().enumerate() {
        let e = ctm::test_nll(model, doc, scheme, samples, batches, n_mc, rng::mix(seed, d as u64))?;
        if e.degenerate {
            log::warn!("document {d}: effective sample size {:.1} below {}", e.min_ess, ctm::MIN_ESS);
        }
        nll += e.normalized_nll;
        n_nll += 1;
        if doc.total() >= 2 {
            point -= ctm::point_estimate_split(model, doc, n_mc, rng::mix(seed, d as u64))?.0;
            n_point += 1;
        }
    }
    Ok(((n_nll > 0).then(|| nll / n_nll as f64), (n_point > 0).then(|| point / n_point as f64)))
}

fn train_ctm(s: &Settings) -> RunResult<Report> {
    let cfg = s.train_config()?;
    let structures = structures(s)?;
    let cov = s.cov_mode()?;
    let topics = s.get_or("topics", 5)?;
    let scheme = nll_scheme(s)?;
    let (train, test) = load_corpus(s)?;
    let (iters, every) = s.cadence(train.len() as u64 * 20)?;
    let es = eval_seed(s)?;
    let mut report = Report::default();
    let mut out = trace_writer(s, &mut report)?;
    let mut models = Vec::new();
    for st in structures {
        let model = CtmModel::initialize(topics, &train, cfg.seed)?;
        let mut tr = CtmTrainer::new(model, &train, st, cov, &cfg)?;
        let notes = format!(
            "approx={};engine={};cov={};nll={};error=split_half",
            structure_name(st),
            cfg.engine.name(),
            if cov == CovMode::Full { "full" } else { "diag" },
            scheme.name()
        );
        let row = |tr: &CtmTrainer, out: &mut TraceWriter| -> RunResult<()> {
            let vlb = ctm::vlb(&tr.model, &tr.posts, &train, st, cfg.mc_samples, es)?;
            let (nll, point) = ctm_test_metrics(&tr.model, &test, s, cfg.mc_samples, es)?;
            out.write(tr.epoch(), tr.iteration(), Some(-vlb.value), nll, point, &notes)?;
            Ok(())
        };
        row(&tr, &mut out)?;
        for t in 1..=iters {
            tr.step(&train)?;
            if t % every == 0 || t == iters {
                row(&tr, &mut out)?;
            }
        }
        models.push((structure_name(st).to_string(), tr.model));
    }
    save_model(s, &SavedModel::Ctm { models }, &mut report)?;
    Ok(report)
}

fn load_saved(s: &Settings) -> RunResult<SavedModel> {
    let p = s.require_path("model")?;
    let f = File::open(&p).map_err(|source| IoError::Open { path: p.clone(), source })?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn eval(kind: ModelKind, s: &Settings) -> RunResult<Report> {
    let saved = load_saved(s)?;
    let test_path = s.require_path("test-data")?;
    let mut report = Report::default();
    match (kind, saved) {
        (ModelKind::Glm, SavedModel::Glm { model, posterior, zscore }) => {
            let t = io::read_libsvm(&test_path, Some(model.dim()))?;
            let t = DesignData::new(zscore.apply(&t.x), t.y)?;
            let ev = glm::evaluate(&model, &posterior, &t, &gh()?)?;
            report.metrics.push(serde_json::json!({ "test_nll": ev.nll, "error_metric": ev.error }));
        }
        (ModelKind::Gme, SavedModel::Gme { model, posterior, zscore }) => {
            let t = io::read_libsvm(&test_path, Some(model.dim()))?;
            let t = DesignData::new(zscore.apply(&t.x), t.y)?;
            let ev = gme::evaluate(&model, &posterior, &t, &GaussHermite::new(gme::PREDICT_POINTS)?, &gh()?)?;
            report.metrics.push(serde_json::json!({ "test_nll": ev.nll, "error_metric": ev.error }));
        }
        (ModelKind::Sgp, SavedModel::Sgp { states }) => {
            let t = io::read_table(&test_path)?;
            for (name, st) in states {
                let ev = sgp::evaluate(&st, &t)?;
                report.metrics.push(serde_json::json!({ "method": name, "test_nll": ev.nll, "mse": ev.error }));
            }
        }
        (ModelKind::Pmf, SavedModel::Pmf { likelihood, state }) => {
            let t = io::read_triplets(&test_path)?;
            let ev = pmf::evaluate(&likelihood, &state, &t, &gh()?)?;
            report.metrics.push(serde_json::json!({ "test_nll": ev.nll, "error_metric": ev.error, "secondary": ev.secondary }));
        }
        (ModelKind::Ctm, SavedModel::Ctm { models }) => {
            let t = io::read_bow(&test_path)?;
            let n_mc = s.get_or("mc-samples", ssvi_core::likelihoods::DEFAULT_MC_SAMPLES)?;
            let seed = eval_seed(s)?;
            for (name, m) in models {
                let reference = CorpusData { vocab: m.vocab(), docs: vec![ssvi_core::data::Document { counts: (0..m.vocab()).map(|w| (w, 1)).collect() }] };
                let t = data::filter_test_vocab(&reference, &t);
                let (nll, point) = ctm_test_metrics(&m, &t, s, n_mc, seed)?;
                report.metrics.push(serde_json::json!({ "approx": name, "test_nll": nll, "split_half_nll": point }));
            }
        }
        (k, _) => return Err(RunError::Usage(format!("saved model does not match subcommand {k:?}"))),
    }
    Ok(report)
}

//! Artifact-driven experiment stages. A run directory holds `manifest.json`
//! plus every stage's outputs; each stage checks its inputs exist, derives
//! its randomness from the manifest, and leaves a stamp under `stages/`.

mod manifest;
mod metrics;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use manifest::{CorpusSizes, EvalConfig, Manifest, SweepConfig, PRESETS};
pub use metrics::{
    emit_report, evaluate_cell, read_metrics_csv, CellResult, Method, MetricsRow, CSV_HEADER,
};

use crate::corpus::{
    gen_base_corpus, gen_domain_corpus, load_jsonl, read_traces, save_jsonl, write_traces,
    CorpusSample, CorpusSpec, Generator,
};
use crate::error::{Error, Result};
use crate::model::{
    build_gated_draft_from_pretrained, load_draft, load_target, save_draft, save_target,
    DraftModel, FreezeMode, LanguageModel, TargetModel,
};
use crate::select::{fit_reference, score_dataset, select_subset, SampleScoreCard, Strategy};
use crate::train::{
    adapt_draft, finetune_target, pretrain_draft, self_generate, train_target, TrainConfig,
    TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenCorpus,
    TrainTarget,
    FinetuneTarget,
    PretrainDraft,
    Selfgen,
    ScoreSelect,
    Adapt,
    Evaluate,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenCorpus,
        Stage::TrainTarget,
        Stage::FinetuneTarget,
        Stage::PretrainDraft,
        Stage::Selfgen,
        Stage::ScoreSelect,
        Stage::Adapt,
        Stage::Evaluate,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainTarget => "train-target",
            Stage::FinetuneTarget => "finetune-target",
            Stage::PretrainDraft => "pretrain-draft",
            Stage::Selfgen => "selfgen",
            Stage::ScoreSelect => "score-select",
            Stage::Adapt => "adapt",
            Stage::Evaluate => "evaluate",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Stage::ALL.iter().map(|x| x.name()).collect();
            Error::Usage(format!("unknown stage {s:?} (valid: {})", names.join(", ")))
        })
    }
}

pub mod paths {
    pub const MANIFEST: &str = "manifest.json";
    pub const BASE: &str = "corpus/base.jsonl";
    pub const DOMAIN: &str = "corpus/domain.jsonl";
    pub const EVAL: &str = "corpus/eval.jsonl";
    pub const GENERAL: &str = "corpus/general.jsonl";
    pub const TARGET_BASE: &str = "models/target_base.ckpt";
    pub const TARGET_DOMAIN: &str = "models/target_domain.ckpt";
    pub const DRAFT_BASE: &str = "models/draft_base.ckpt";
    pub const SELFGEN_DIR: &str = "selfgen";
    pub const SELFGEN: &str = "selfgen/domain.jsonl";
    pub const SELFGEN_TRACES: &str = "domain_traces.bin";
    pub const GENERAL_GEN: &str = "selfgen/general.jsonl";
    pub const GENERAL_TRACES: &str = "general_traces.bin";
    pub const SCORES: &str = "select/scores.jsonl";
    pub const REFERENCE: &str = "select/reference.json";
    pub const COMPACT: &str = "select/compact.jsonl";
    pub const ADAPT_REPORTS: &str = "adapt/reports.json";
    pub const EVAL_ROWS: &str = "eval/rows.json";
    pub const SWEEP_ROWS: &str = "sweep/rows.json";

    pub fn adapted(method: &str) -> String {
        format!("adapt/{method}.ckpt")
    }
}

/// A run directory bound to one manifest.
#[derive(Debug)]
pub struct Run {
    root: PathBuf,
    manifest: Manifest,
    hash: String,
    /// Progress lines go to stderr unless silenced.
    pub verbose: bool,
}

impl Run {
    /// Binds `root` to `manifest`, writing `manifest.json` if absent. A
    /// directory already holding a different manifest is refused.
    pub fn create(root: &Path, manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        let run = Self {
            root: root.to_path_buf(),
            hash: manifest.hash(),
            manifest,
            verbose: false,
        };
        let path = run.path(paths::MANIFEST);
        if path.exists() {
            let existing = Self::open(root)?;
            if existing.hash != run.hash {
                return Err(Error::Config(format!(
                    "{} holds a different manifest; use a fresh run directory",
                    root.display()
                )));
            }
            return Ok(run);
        }
        run.write_json(paths::MANIFEST, &run.manifest)?;
        Ok(run)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(paths::MANIFEST);
        if !path.exists() {
            return Err(Error::Dependency(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            hash: manifest.hash(),
            manifest,
            verbose: false,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_hash(&self) -> &str {
        &self.hash
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn require(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Dependency(p))
        }
    }

    fn output(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let p = self.output(rel)?;
        let text = serde_json::to_string_pretty(value).expect("serialisable artifact");
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        let p = self.require(rel)?;
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    }

    fn corpus(&self, rel: &str) -> Result<Vec<CorpusSample>> {
        load_jsonl(&self.require(rel)?)
    }

    fn save_corpus(&self, rel: &str, samples: &[CorpusSample]) -> Result<()> {
        save_jsonl(samples, &self.output(rel)?)
    }

    fn target(&self, rel: &str) -> Result<TargetModel> {
        Ok(load_target(&self.require(rel)?)?.0)
    }

    fn draft(&self, rel: &str) -> Result<DraftModel> {
        Ok(load_draft(&self.require(rel)?)?.0)
    }

    fn provenance(&self, stage: Stage, report: Option<&TrainReport>) -> serde_json::Value {
        serde_json::json!({
            "manifest_hash": self.hash,
            "stage": stage.name(),
            "report": report,
        })
    }

    fn train_cfg(&self, base: &TrainConfig, label: &str) -> TrainConfig {
        TrainConfig {
            seed: self.manifest.seed_for(label),
            ..base.clone()
        }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[{}] {}", self.manifest.name, msg.as_ref());
        }
    }

    fn stamp(&self, stage: Stage, outputs: &[&str]) -> Result<()> {
        self.write_json(
            &format!("stages/{}.json", stage.name()),
            &serde_json::json!({
                "stage": stage.name(),
                "manifest_hash": self.hash,
                "outputs": outputs,
            }),
        )
    }

    pub fn run_all(&self) -> Result<()> {
        Stage::ALL.into_iter().try_for_each(|s| self.run_stage(s))
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        self.log(format!("stage {}", stage.name()));
        let started = std::time::Instant::now();
        let outputs = match stage {
            Stage::GenCorpus => self.gen_corpus()?,
            Stage::TrainTarget => self.train_target()?,
            Stage::FinetuneTarget => self.finetune_target()?,
            Stage::PretrainDraft => self.pretrain_draft()?,
            Stage::Selfgen => self.selfgen()?,
            Stage::ScoreSelect => self.score_select()?,
            Stage::Adapt => self.adapt()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Sweep => self.sweep()?,
            Stage::Report => self.report()?,
        };
        self.log(format!("stage {} done in {:.1?}", stage.name(), started.elapsed()));
        self.stamp(stage, &outputs)
    }

    fn gen_corpus(&self) -> Result<Vec<&'static str>> {
        let m = &self.manifest;
        let spec = |g: Generator, size: usize, label: &str| CorpusSpec::new(g, size, m.seed_for(label));
        let base = gen_base_corpus(&spec(Generator::BaseText, m.sizes.base, "corpus.base"))?;
        let domain = gen_domain_corpus(&spec(m.domain, m.sizes.domain, "corpus.domain"))?;
        let eval = gen_domain_corpus(&spec(m.domain, m.sizes.eval, "corpus.eval"))?;
        let general = gen_base_corpus(&spec(Generator::BaseText, m.sizes.general, "corpus.general"))?;
        self.save_corpus(paths::BASE, &base)?;
        self.save_corpus(paths::DOMAIN, &domain)?;
        self.save_corpus(paths::EVAL, &eval)?;
        self.save_corpus(paths::GENERAL, &general)?;
        Ok(vec![paths::BASE, paths::DOMAIN, paths::EVAL, paths::GENERAL])
    }

    fn train_target(&self) -> Result<Vec<&'static str>> {
        let base = self.corpus(paths::BASE)?;
        let cfg = self.train_cfg(&self.manifest.train_target, "train-target");
        let (t, report) = train_target(&base, self.manifest.target.clone(), &cfg)?;
        self.log(format!("epoch losses {:?}", report.epoch_losses));
        save_target(&t, &self.output(paths::TARGET_BASE)?, self.provenance(Stage::TrainTarget, Some(&report)))?;
        Ok(vec![paths::TARGET_BASE])
    }

    fn finetune_target(&self) -> Result<Vec<&'static str>> {
        let base = self.target(paths::TARGET_BASE)?;
        let domain = self.corpus(paths::DOMAIN)?;
        let cfg = self.train_cfg(&self.manifest.finetune_target, "finetune-target");
        let (t, report) = finetune_target(&base, &domain, &cfg)?;
        self.log(format!("epoch losses {:?}", report.epoch_losses));
        save_target(&t, &self.output(paths::TARGET_DOMAIN)?, self.provenance(Stage::FinetuneTarget, Some(&report)))?;
        Ok(vec![paths::TARGET_DOMAIN])
    }

    fn pretrain_draft(&self) -> Result<Vec<&'static str>> {
        let target = self.target(paths::TARGET_BASE)?;
        let base = self.corpus(paths::BASE)?;
        let cfg = self.train_cfg(&self.manifest.pretrain_draft, "pretrain-draft");
        let (d, report) = pretrain_draft(&target, &base, self.manifest.draft.clone(), &cfg)?;
        self.log(format!("epoch losses {:?}", report.epoch_losses));
        save_draft(&d, &self.output(paths::DRAFT_BASE)?, self.provenance(Stage::PretrainDraft, Some(&report)))?;
        Ok(vec![paths::DRAFT_BASE])
    }

    /// Completes domain prompts (the adaptation pool) and general prompts
    /// (the scoring reference) with the fine-tuned target.
    fn selfgen(&self) -> Result<Vec<&'static str>> {
        let target = self.target(paths::TARGET_DOMAIN)?;
        let domain = self.corpus(paths::DOMAIN)?;
        let general = self.corpus(paths::GENERAL)?;
        let dir = self.output(paths::SELFGEN)?.parent().expect("nested path").to_path_buf();
        let cfg = &self.manifest.selfgen;
        for (prompts, out, traces, label) in [
            (&domain, paths::SELFGEN, paths::SELFGEN_TRACES, "selfgen.domain"),
            (&general, paths::GENERAL_GEN, paths::GENERAL_TRACES, "selfgen.general"),
        ] {
            let mut ds = self_generate(&target, prompts, cfg, self.manifest.seed_for(label))?;
            write_traces(&mut ds.samples, &ds.traces, &dir, traces)?;
            self.save_corpus(out, &ds.samples)?;
        }
        Ok(vec![paths::SELFGEN, paths::GENERAL_GEN])
    }

    fn load_traced(&self, rel: &str) -> Result<(Vec<CorpusSample>, Vec<crate::nn::Matrix>)> {
        let samples = self.corpus(rel)?;
        let dir = self.path(paths::SELFGEN_DIR);
        let traces = read_traces(&samples, &dir)?;
        Ok((samples, traces))
    }

    fn scores(&self) -> Result<(Vec<SampleScoreCard>, String)> {
        let path = self.require(paths::SCORES)?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cards = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<SampleScoreCard>>>()?;
        let reference: serde_json::Value = self.read_json(paths::REFERENCE)?;
        let hash = reference["basis_hash"].as_str().unwrap_or_default().to_string();
        Ok((cards, hash))
    }

    /// Scores the self-generated pool from stored traces only and keeps the
    /// budgeted top share.
    fn score_select(&self) -> Result<Vec<&'static str>> {
        let (_, general_traces) = self.load_traced(paths::GENERAL_GEN)?;
        let (samples, traces) = self.load_traced(paths::SELFGEN)?;
        let cfg = &self.manifest.select;
        let reference = fit_reference(&general_traces, cfg)?;
        let hash = reference.basis.hash();
        let cards = score_dataset(&samples, &traces, &reference.basis, &reference.stats, cfg.rho)?;
        let lines: Vec<String> = cards
            .iter()
            .map(|c| serde_json::to_string(c).expect("card serialises"))
            .collect();
        let p = self.output(paths::SCORES)?;
        std::fs::write(&p, lines.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
        self.write_json(
            paths::REFERENCE,
            &serde_json::json!({
                "basis_hash": hash,
                "pca_dim": cfg.pca_dim,
                "eigenvalues": reference.basis.eigenvalues,
                "rho": cfg.rho,
                "shrinkage_eps": cfg.shrinkage_eps,
            }),
        )?;
        let compact = select_subset(&samples, &cards, self.manifest.budget_fraction, Strategy::Selected, 0, &hash)?;
        self.save_corpus(paths::COMPACT, &compact)?;
        Ok(vec![paths::SCORES, paths::REFERENCE, paths::COMPACT])
    }

    fn gated_base(&self) -> Result<DraftModel> {
        build_gated_draft_from_pretrained(&self.draft(paths::DRAFT_BASE)?)
    }

    fn adapt_with(
        &self,
        gated: &DraftModel,
        target: &TargetModel,
        data: &[CorpusSample],
        mode: FreezeMode,
    ) -> Result<(DraftModel, TrainReport)> {
        adapt_draft(gated, target, data, &self.train_cfg(&self.manifest.adapt, "adapt"), mode)
    }

    /// Full fine-tuning and EDA on the ground-truth domain corpus, and EDA on
    /// the selected self-generated subset.
    fn adapt(&self) -> Result<Vec<&'static str>> {
        let target = self.target(paths::TARGET_DOMAIN)?;
        let gated = self.gated_base()?;
        let domain = self.corpus(paths::DOMAIN)?;
        let compact = self.corpus(paths::COMPACT)?;
        let mut reports = BTreeMap::new();
        for (method, data, mode) in [
            (Method::FullFt, &domain, FreezeMode::FullFt),
            (Method::EdaBase, &domain, FreezeMode::Eda),
            (Method::EdaSelfgenSelected, &compact, FreezeMode::Eda),
        ] {
            let (d, report) = self.adapt_with(&gated, &target, data, mode)?;
            self.log(format!("{} epoch losses {:?}", method.name(), report.epoch_losses));
            save_draft(&d, &self.output(&paths::adapted(method.name()))?, self.provenance(Stage::Adapt, Some(&report)))?;
            reports.insert(method.name(), report);
        }
        self.write_json(paths::ADAPT_REPORTS, &reports)?;
        Ok(vec![paths::ADAPT_REPORTS])
    }

    fn cell(
        &self,
        target: &dyn LanguageModel,
        draft: &dyn LanguageModel,
        prompts: &[CorpusSample],
        k: usize,
        temperature: f64,
    ) -> Result<CellResult> {
        let e = &self.manifest.eval;
        // The schedule depends on the cell only, never on the draft.
        let seed = self.manifest.seed_for(&format!("evaluate.K{k}.T{temperature}"));
        evaluate_cell(target, draft, prompts, k, temperature, e.min_rounds, e.max_new_tokens, e.draft_cost_ratio, seed)
    }

    fn row(&self, method: Method, cell: &CellResult, k: usize, temperature: f64) -> MetricsRow {
        MetricsRow {
            method,
            domain_tag: self.manifest.domain.domain_tag().to_string(),
            k,
            temperature,
            tau: cell.tau,
            speedup_proxy: cell.speedup_proxy,
            trainable_params: 0,
            train_steps: 0,
            data_fraction: 0.0,
            study: "methods".into(),
            selection: "none".into(),
        }
    }

    /// The four-method grid plus the base-versus-domain target pairing.
    fn evaluate(&self) -> Result<Vec<&'static str>> {
        let target = self.target(paths::TARGET_DOMAIN)?;
        let target_base = self.target(paths::TARGET_BASE)?;
        let prompts = self.corpus(paths::EVAL)?;
        let reports: BTreeMap<String, TrainReport> = self.read_json(paths::ADAPT_REPORTS)?;
        let mut drafts = vec![(Method::TrainingFree, self.draft(paths::DRAFT_BASE)?)];
        for m in [Method::FullFt, Method::EdaBase, Method::EdaSelfgenSelected] {
            drafts.push((m, self.draft(&paths::adapted(m.name()))?));
        }
        let mut rows = Vec::new();
        let e = &self.manifest.eval;
        for &k in &e.ks {
            for &t in &e.temperatures {
                for (method, draft) in &drafts {
                    let cell = self.cell(&target, draft, &prompts, k, t)?;
                    let mut row = self.row(*method, &cell, k, t);
                    if let Some(r) = reports.get(method.name()) {
                        row.trainable_params = r.trainable_params;
                        row.train_steps = r.steps;
                        row.data_fraction = match method {
                            Method::EdaSelfgenSelected => self.manifest.budget_fraction,
                            _ => 1.0,
                        };
                        row.selection = match method {
                            Method::EdaSelfgenSelected => Strategy::Selected.name().into(),
                            _ => "ground_truth".into(),
                        };
                    }
                    self.log(format!("{} K={k} T={t}: tau {:.3} over {} rounds", method.name(), cell.tau, cell.complete_rounds));
                    rows.push(row);
                }
            }
        }
        let (k, t) = (e.transfer_k, e.transfer_temperature);
        let base_draft = &drafts[0].1;
        for (label, tgt) in [("target_base", &target_base), ("target_domain", &target)] {
            let cell = self.cell(tgt, base_draft, &prompts, k, t)?;
            let mut row = self.row(Method::TrainingFree, &cell, k, t);
            row.study = "transfer".into();
            row.selection = label.into();
            self.log(format!("draft_base -> {label}: tau {:.3}", cell.tau));
            rows.push(row);
        }
        self.write_json(paths::EVAL_ROWS, &rows)?;
        Ok(vec![paths::EVAL_ROWS])
    }

    /// Adapts a fresh gated draft per (fraction, strategy); identical
    /// training sets are trained once.
    fn sweep(&self) -> Result<Vec<&'static str>> {
        let target = self.target(paths::TARGET_DOMAIN)?;
        let gated = self.gated_base()?;
        let prompts = self.corpus(paths::EVAL)?;
        let samples = self.corpus(paths::SELFGEN)?;
        let (cards, hash) = self.scores()?;
        let s = &self.manifest.sweep;
        let random_seed = self.manifest.seed_for("sweep.random");
        let mut done: BTreeMap<Vec<u64>, MetricsRow> = BTreeMap::new();
        let mut rows = Vec::new();
        for &f in &s.fractions {
            for &strategy in &s.strategies {
                let subset = select_subset(&samples, &cards, f, strategy, random_seed, &hash)?;
                let ids: Vec<u64> = subset.iter().map(|x| x.sample_id).collect();
                let mut row = match done.get(&ids) {
                    Some(r) => r.clone(),
                    None => {
                        let (d, report) = self.adapt_with(&gated, &target, &subset, FreezeMode::Eda)?;
                        let cell = self.cell(&target, &d, &prompts, s.k, s.temperature)?;
                        let mut r = self.row(Method::EdaSelfgenSelected, &cell, s.k, s.temperature);
                        r.trainable_params = report.trainable_params;
                        r.train_steps = report.steps;
                        done.insert(ids, r.clone());
                        r
                    }
                };
                row.study = "sweep".into();
                row.selection = strategy.name().into();
                row.data_fraction = f;
                self.log(format!("{}@{f}: tau {:.3}", strategy.name(), row.tau));
                rows.push(row);
            }
        }
        self.write_json(paths::SWEEP_ROWS, &rows)?;
        Ok(vec![paths::SWEEP_ROWS])
    }

    fn report(&self) -> Result<Vec<&'static str>> {
        let mut rows: Vec<MetricsRow> = self.read_json(paths::EVAL_ROWS)?;
        if self.path(paths::SWEEP_ROWS).exists() {
            rows.extend(self.read_json::<Vec<MetricsRow>>(paths::SWEEP_ROWS)?);
        }
        emit_report(&rows, &self.root, &self.hash)?;
        Ok(vec!["metrics.csv", "plotdata.json"])
    }

    /// Rows of a finished run: the method grid, transfer pairings and sweep.
    pub fn rows(&self) -> Result<Vec<MetricsRow>> {
        read_metrics_csv(&self.require("metrics.csv")?)
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::report::{match_stats_csv, match_stats_svg};
use super::{parse_override, ConfigArgs, Role, Split};
use crate::data::{generate_dataset, load_splits, save_splits, Example, Splits, Vocab};
use crate::distill::parse_trace_jsonl;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::train::{
    domain_seed, evaluate, load_model, load_verbalizers, match_drift, save_model, save_verbalizers, trace_example,
    ArtifactKind, CheckpointMeta, LogRecord, Pipeline, PipelineConfig, Stage, StudentRoute,
};
use crate::verbalizer::Verbalizer;

/// Preset, then `config.toml` of the run directory, then `--config`, then
/// every `--set`, validated.
pub fn resolve_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::preset(&args.preset)?;
    let saved = RunDir::new(&args.run_dir).config_path();
    if saved.exists() {
        cfg = cfg.merge_toml(&fs::read_to_string(&saved)?)?;
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg = cfg.merge_toml(&text)?;
    }
    for raw in &args.overrides {
        let (k, v) = parse_override(raw)?;
        cfg = cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir { root: root.to_path_buf() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn model_path(&self, role: Role) -> PathBuf {
        self.root.join(format!("{}.ckpt", role.name()))
    }

    pub fn verbalizer_path(&self, role: Role) -> PathBuf {
        self.root.join(format!("{}.verb.ckpt", role.name()))
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.root.join("trace.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn write_config(&self, cfg: &PipelineConfig) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::write(self.config_path(), cfg.to_toml())?;
        Ok(())
    }

    /// Loads the stored splits, generating and storing them on first use.
    pub fn splits(&self, cfg: &PipelineConfig) -> Result<Splits> {
        if self.data_dir().join("train.jsonl").exists() {
            return load_splits(&self.data_dir());
        }
        let splits = generate_dataset(&cfg.task_spec(), cfg.n_examples, domain_seed(cfg.seed, "data"))?;
        save_splits(&self.data_dir(), &splits)?;
        Ok(splits)
    }

    fn append_log(&self, records: &[LogRecord]) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.log_path())?;
        for r in records {
            writeln!(f, "{}", serde_json::to_string(r).expect("log record serialises"))?;
        }
        Ok(())
    }

    fn write_report(&self, name: &str, text: &str) -> Result<PathBuf> {
        fs::create_dir_all(self.reports())?;
        let path = self.reports().join(name);
        fs::write(&path, text)?;
        Ok(path)
    }

    fn require(&self, path: &Path, hint: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("{} is missing; {hint}", path.display())))
        }
    }

    pub fn load_backbone(&self, role: Role, expected: &ModelConfig) -> Result<Transformer<f32>> {
        let path = self.model_path(role);
        self.require(&path, &format!("train the {} first", role.name()))?;
        let (model, _) = load_model::<f32>(&path)?;
        if &model.cfg != expected {
            return Err(Error::Config(format!(
                "{} checkpoint was built with a different model config than the current settings",
                role.name()
            )));
        }
        Ok(model)
    }

    pub fn load_verbalizers(&self, role: Role, backbone: &Transformer<f32>) -> Result<Vec<Verbalizer<f32>>> {
        let path = self.verbalizer_path(role);
        self.require(&path, "run `train --stage verbalize` first")?;
        let (verbs, meta) = load_verbalizers::<f32>(&path)?;
        if role == Role::Teacher && meta.backbone_digest.as_deref() != Some(backbone.params.digest().as_str()) {
            return Err(Error::Checkpoint("teacher verbalizers were trained on a different backbone".into()));
        }
        if verbs.iter().any(|v| v.d_model != backbone.cfg.d_model || v.layer >= backbone.cfg.n_layers) {
            return Err(Error::Checkpoint(format!("{} verbalizers do not fit the backbone", role.name())));
        }
        Ok(verbs)
    }

    fn meta(&self, cfg: &PipelineConfig, kind: ArtifactKind, stage: Stage, steps: usize, model: &ModelConfig) -> CheckpointMeta {
        let mut meta = CheckpointMeta::new(kind, stage.name(), steps, model);
        meta.config = serde_json::to_value(cfg).expect("config serialises");
        meta
    }

    fn save_backbone(&self, cfg: &PipelineConfig, role: Role, stage: Stage, steps: usize, model: &Transformer<f32>) -> Result<()> {
        let kind = if role == Role::Teacher { ArtifactKind::Teacher } else { ArtifactKind::Student };
        save_model(&self.model_path(role), model, &self.meta(cfg, kind, stage, steps, &model.cfg))
    }

    fn save_verbs(
        &self,
        cfg: &PipelineConfig,
        role: Role,
        steps: usize,
        backbone: &Transformer<f32>,
        verbs: &[Verbalizer<f32>],
    ) -> Result<()> {
        let mut meta = self.meta(cfg, ArtifactKind::Verbalizers, Stage::Verbalize, steps, &backbone.cfg);
        meta.verbalizer_arch = Some(cfg.verbalizer_arch);
        meta.taps = Some(verbs.iter().map(|v| v.layer).collect());
        meta.backbone_digest = Some(backbone.params.digest());
        save_verbalizers(&self.verbalizer_path(role), verbs, &meta)
    }
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

fn stage_teacher(run: &RunDir, p: &Pipeline, out: &mut impl Write) -> Result<()> {
    let (teacher, rep) = p.train_teacher()?;
    run.append_log(&rep.log)?;
    run.save_backbone(&p.cfg, Role::Teacher, Stage::Teacher, rep.steps_run, &teacher)?;
    let dev = rep.dev_exact_match.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    writeln!(out, "teacher: {} steps, dev exact-match {dev}", rep.steps_run).map_err(io)
}

fn stage_verbalize(run: &RunDir, p: &Pipeline, out: &mut impl Write) -> Result<()> {
    let teacher = run.load_backbone(Role::Teacher, &p.cfg.teacher_model())?;
    let (tv, rep) = p.verbalize(&teacher, &p.cfg.teacher_tap_set()?, "teacher")?;
    run.append_log(&rep.log)?;
    run.save_verbs(&p.cfg, Role::Teacher, rep.steps_run, &teacher, &tv)?;
    let last = |r: &crate::train::StageReport| r.losses().last().copied().unwrap_or(f64::NAN);
    writeln!(out, "teacher verbalizers: {} taps, final loss {:.4}", tv.len(), last(&rep)).map_err(io)?;

    let student = if run.model_path(Role::Student).exists() {
        run.load_backbone(Role::Student, &p.cfg.student_model())?
    } else {
        let s = p.init_student()?;
        run.save_backbone(&p.cfg, Role::Student, Stage::Verbalize, 0, &s)?;
        s
    };
    let (sv, rep) = p.verbalize(&student, &p.cfg.student_tap_set()?, "student")?;
    run.append_log(&rep.log)?;
    run.save_verbs(&p.cfg, Role::Student, rep.steps_run, &student, &sv)?;
    writeln!(out, "student verbalizers: {} taps, final loss {:.4}", sv.len(), last(&rep)).map_err(io)
}

fn stage_interact(run: &RunDir, p: &Pipeline, out: &mut impl Write) -> Result<()> {
    let teacher = run.load_backbone(Role::Teacher, &p.cfg.teacher_model())?;
    let tv = run.load_verbalizers(Role::Teacher, &teacher)?;
    let mut student = run.load_backbone(Role::Student, &p.cfg.student_model())?;
    let mut sv = run.load_verbalizers(Role::Student, &student)?;
    let before = student.params.digest();
    let rep = p.interact(&teacher, &tv, &mut student, &mut sv)?;
    if before == student.params.digest() && rep.report.steps_run > 0 {
        return Err(Error::Internal("interaction left the student unchanged".into()));
    }
    run.append_log(&rep.report.log)?;
    let mut trace = String::new();
    for (step, tr) in &rep.traces {
        trace.push_str(&tr.to_jsonl(*step));
    }
    fs::write(run.trace_path(), trace)?;
    run.save_backbone(&p.cfg, Role::Student, Stage::Interact, rep.report.steps_run, &student)?;
    if p.cfg.train_student_verbalizers {
        let mut meta = run.meta(&p.cfg, ArtifactKind::Verbalizers, Stage::Interact, rep.report.steps_run, &student.cfg);
        meta.verbalizer_arch = Some(p.cfg.verbalizer_arch);
        meta.taps = Some(sv.iter().map(|v| v.layer).collect());
        meta.backbone_digest = Some(student.params.digest());
        save_verbalizers(&run.verbalizer_path(Role::Student), &sv, &meta)?;
    }
    let last = rep.report.losses().last().copied().unwrap_or(f64::NAN);
    writeln!(out, "interact: {} steps, final loss {last:.4}, {} matchings traced", rep.report.steps_run, rep.traces.len())
        .map_err(io)
}

fn stage_reinforce(run: &RunDir, p: &Pipeline, out: &mut impl Write) -> Result<()> {
    let mut student = if run.model_path(Role::Student).exists() {
        run.load_backbone(Role::Student, &p.cfg.student_model())?
    } else {
        p.init_student()?
    };
    let rep = p.reinforce(&mut student)?;
    run.append_log(&rep.log)?;
    run.save_backbone(&p.cfg, Role::Student, Stage::Reinforce, rep.steps_run, &student)?;
    let dev = rep.dev_exact_match.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    writeln!(out, "reinforce: {} steps, dev exact-match {dev}", rep.steps_run).map_err(io)
}

pub fn cmd_generate_data(args: &ConfigArgs, out: &mut impl Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let run = RunDir::new(&args.run_dir);
    run.write_config(&cfg)?;
    let splits = generate_dataset(&cfg.task_spec(), cfg.n_examples, domain_seed(cfg.seed, "data"))?;
    save_splits(&run.data_dir(), &splits)?;
    writeln!(
        out,
        "{} train / {} dev / {} test examples in {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        run.data_dir().display()
    )
    .map_err(io)
}

/// Runs `stage`; `all` starts the student afresh and follows `route`.
pub fn cmd_train(args: &ConfigArgs, stage: Stage, route: StudentRoute, out: &mut impl Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let run = RunDir::new(&args.run_dir);
    run.write_config(&cfg)?;
    let splits = run.splits(&cfg)?;
    let p = Pipeline::with_splits(cfg, splits)?;
    match stage {
        Stage::Teacher => stage_teacher(&run, &p, out),
        Stage::Verbalize => stage_verbalize(&run, &p, out),
        Stage::Interact => stage_interact(&run, &p, out),
        Stage::Reinforce => stage_reinforce(&run, &p, out),
        Stage::All => {
            for stale in [run.model_path(Role::Student), run.verbalizer_path(Role::Student), run.trace_path(), run.log_path()] {
                if stale.exists() {
                    fs::remove_file(stale)?;
                }
            }
            if route != StudentRoute::ReinforceOnly {
                stage_teacher(&run, &p, out)?;
                stage_verbalize(&run, &p, out)?;
                stage_interact(&run, &p, out)?;
            }
            if route != StudentRoute::InteractOnly {
                stage_reinforce(&run, &p, out)?;
            }
            let student = run.load_backbone(Role::Student, &p.cfg.student_model())?;
            let report = p.evaluate(&student, &[])?;
            run.write_report("eval_student_test.json", &serde_json::to_string_pretty(&report).expect("serialises"))?;
            writeln!(out, "student test exact-match {:.4} ({} examples)", report.exact_match, report.n).map_err(io)
        }
    }
}

fn split_of(splits: &Splits, split: Split) -> &[Example] {
    match split {
        Split::Train => &splits.train,
        Split::Dev => &splits.dev,
        Split::Test => &splits.test,
    }
}

fn role_model(cfg: &PipelineConfig, role: Role) -> ModelConfig {
    match role {
        Role::Teacher => cfg.teacher_model(),
        Role::Student => cfg.student_model(),
    }
}

pub fn cmd_eval(args: &ConfigArgs, role: Role, split: Split, out: &mut impl Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let run = RunDir::new(&args.run_dir);
    run.write_config(&cfg)?;
    let splits = run.splits(&cfg)?;
    let model = run.load_backbone(role, &role_model(&cfg, role))?;
    let verbs = if run.verbalizer_path(role).exists() { run.load_verbalizers(role, &model)? } else { Vec::new() };
    let report = evaluate(&model, &verbs, split_of(&splits, split), cfg.eval_batch)?;
    let text = serde_json::to_string_pretty(&report).expect("serialises");
    run.write_report(&format!("eval_{}_{}.json", role.name(), split.name()), &text)?;
    writeln!(out, "{text}").map_err(io)
}

pub fn cmd_trace_verbalize(args: &ConfigArgs, role: Role, split: Split, index: usize, out: &mut impl Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let run = RunDir::new(&args.run_dir);
    run.write_config(&cfg)?;
    let splits = run.splits(&cfg)?;
    let model = run.load_backbone(role, &role_model(&cfg, role))?;
    if !run.verbalizer_path(role).exists() {
        return Err(Error::Invalid(format!("no verbalizers for the {}; run `train --stage verbalize` first", role.name())));
    }
    let verbs = run.load_verbalizers(role, &model)?;
    let examples = split_of(&splits, split);
    let ex = examples.get(index).ok_or_else(|| {
        Error::Invalid(format!("example {index} out of range; {} split has {}", split.name(), examples.len()))
    })?;
    let rows = trace_example(&model, &verbs, ex)?;
    writeln!(out, "prompt:   {}", Vocab::decode(&ex.prompt_tokens)).map_err(io)?;
    writeln!(out, "gold:     {}", Vocab::decode(&ex.response_tokens)).map_err(io)?;
    let mut jsonl = String::new();
    for r in &rows {
        let layer = r.layer.map_or("final".to_string(), |l| format!("layer {l}"));
        let ce: Vec<String> = r.token_ce.iter().map(|c| format!("{c:.3}")).collect();
        writeln!(out, "{layer:>9}: {:<24} ce [{}]", Vocab::decode(&r.decoded), ce.join(", ")).map_err(io)?;
        jsonl.push_str(&serde_json::to_string(r).expect("serialises"));
        jsonl.push('\n');
    }
    run.write_report(&format!("trace_{}_{}_{index}.jsonl", role.name(), split.name()), &jsonl)?;
    Ok(())
}

pub fn cmd_match_stats(args: &ConfigArgs, trace: Option<&Path>, svg: bool, out: &mut impl Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let run = RunDir::new(&args.run_dir);
    let path = trace.map(Path::to_path_buf).unwrap_or_else(|| run.trace_path());
    run.require(&path, "run `train --stage interact` first")?;
    let traces = parse_trace_jsonl(&fs::read_to_string(&path)?)?;
    let Some(first) = traces.first() else {
        return Err(Error::Invalid(format!("trace log {} is empty", path.display())));
    };
    let t_s = first.1.steps.len();
    let observed = traces.iter().flat_map(|(_, t)| t.steps.iter().map(|s| s.search_hi + 1)).max().unwrap_or(1);
    let t_l = observed.max(cfg.teacher_tap_set()?.len());
    let total = traces.iter().map(|(s, _)| s + 1).max().unwrap_or(1);
    let drift = match_drift(&traces, total, t_s, t_l)?;
    let csv_path = run.reports().join("match_stats.csv");
    fs::create_dir_all(run.reports())?;
    fs::write(&csv_path, match_stats_csv(&drift)?)?;
    writeln!(out, "wrote {}", csv_path.display()).map_err(io)?;
    if svg {
        let p = run.write_report("match_stats.svg", &match_stats_svg(&drift))?;
        writeln!(out, "wrote {}", p.display()).map_err(io)?;
    }
    for (name, h) in [("first decile", &drift.first), ("last decile", &drift.last)] {
        let per: Vec<String> =
            (0..t_s).map(|i| h.mean_depth_of(i).map_or("-".into(), |m| format!("{m:.2}"))).collect();
        let mean = h.mean_depth().map_or("-".into(), |m| format!("{m:.3}"));
        writeln!(out, "{name} (steps {}..{}): mean matched tap {mean}, per student tap [{}]", h.from_step, h.to_step, per.join(", "))
            .map_err(io)?;
    }
    Ok(())
}

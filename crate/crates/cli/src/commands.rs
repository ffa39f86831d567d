use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use splatrig::engine::{
    fit_avatar as run_fit, image_metrics, list_sequences, load_avatar, load_fit, load_seq, neutral_pose, orbit, predicted_poses, recorded_poses,
    render_pose, render_views, samples, save_fit, save_seq, synth_scene, train_sequence, evaluate_sequences, Avatar, Container, DensifyLog,
    EvalReport, ExprSource, FitObserver, FitState, FramePose, RunConfig, SeqObserver, SeqState, StepLog,
};
use splatrig::gradcheck::{select, summarize, Fault, SuiteSummary};
use splatrig::mesh::{load_mesh, BlendMesh};
use splatrig::raster::save_png;
use splatrig::sequence::{SeqStepLog, SequenceData};

use crate::{FaultArg, FitArgs, GradArgs, Global, MetricsArgs, RenderArgs, SeqArgs, Source};

fn out_dir(g: &Global, default: &str) -> Result<PathBuf> {
    let d = g.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

/// `--config` if given, else `fallback`, else defaults; then flag overrides.
fn run_config(g: &Global, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&g.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(h) = g.holdout_camera {
        cfg.holdout_camera = Some(h);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn no_overrides(g: &Global, what: &str) -> Result<()> {
    if g.config.is_some() || g.seed.is_some() || g.holdout_camera.is_some() {
        bail!("{what} keeps the configuration stored in the checkpoint; drop --config/--seed/--holdout-camera");
    }
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, json(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(Self(BufWriter::new(f)))
    }

    fn push<T: Serialize>(&mut self, row: &T) -> splatrig::Result<()> {
        let line = serde_json::to_string(row).map_err(|e| splatrig::Error::Format { what: "log row".into(), detail: e.to_string() })?;
        writeln!(self.0, "{line}").and_then(|_| self.0.flush()).map_err(|source| splatrig::Error::Io { path: "log".into(), source })
    }
}

pub fn synth_data(g: &Global) -> Result<ExitCode> {
    let cfg = run_config(g, None)?;
    let out = out_dir(g, "data")?;
    let report = synth_scene(&cfg, &out)?;
    println!("{}", json(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn dataset(data: &Path) -> Result<(BlendMesh, SequenceData)> {
    let mesh = load_mesh(&data.join("mesh.obj")).with_context(|| format!("no dataset mesh under {}", data.display()))?;
    let rec = SequenceData::load(&data.join("avatar"))?;
    Ok((mesh, rec))
}

struct FitFiles {
    out: PathBuf,
    steps: JsonLines,
    evals: JsonLines,
    densify: JsonLines,
    preview: (usize, usize, FramePose),
    last: Option<StepLog>,
}

impl FitFiles {
    fn preview_path(&self, step: u64) -> PathBuf {
        let (c, f, _) = &self.preview;
        self.out.join("previews").join(format!("step{step:06}_cam{c}_frame{f}.png"))
    }
}

impl FitObserver for FitFiles {
    fn on_step(&mut self, _state: &FitState, log: &StepLog) -> splatrig::Result<()> {
        self.last = Some(log.clone());
        self.steps.push(log)
    }

    fn on_eval(&mut self, state: &FitState, eval: &EvalReport) -> splatrig::Result<()> {
        self.evals.push(eval)?;
        let (c, _, pose) = &self.preview;
        let cam = &state.config.scene.cameras.build()[*c];
        let img = render_pose(&state.avatar, pose, cam)?;
        let p = self.preview_path(state.step);
        std::fs::create_dir_all(p.parent().expect("preview dir")).map_err(|source| splatrig::Error::Io { path: p.clone(), source })?;
        save_png(&p, &img.rgb, cam.width, cam.height)?;
        println!("step {:>6}  holdout camera {}  psnr {:.2} dB  ssim {:.4}  splats {}", eval.step, eval.camera, eval.psnr, eval.ssim, state.avatar.set.len());
        Ok(())
    }

    fn on_densify(&mut self, _state: &FitState, log: &DensifyLog) -> splatrig::Result<()> {
        self.densify.push(log)
    }

    fn on_failure(&mut self, state: &FitState, err: &splatrig::Error) {
        #[derive(Serialize)]
        struct Dump<'a> {
            step: u64,
            error: String,
            splats: usize,
            last_logged: &'a Option<StepLog>,
        }
        let dump = Dump { step: state.step, error: err.to_string(), splats: state.avatar.set.len(), last_logged: &self.last };
        let _ = write_json(&self.out.join("failure.json"), &dump);
        let _ = save_fit(&self.out.join("failure.ckpt"), state);
        eprintln!("fit aborted at step {}; diagnostics in {}", state.step, self.out.join("failure.json").display());
    }
}

pub fn fit_avatar(g: &Global, a: &FitArgs) -> Result<ExitCode> {
    let (base, rec) = dataset(&a.data)?;
    let resume = g.ckpt.is_some();
    let mut state = match &g.ckpt {
        Some(p) => {
            no_overrides(g, "resuming a fit")?;
            load_fit(p)?
        }
        None => FitState::new(run_config(g, Some(&a.data.join("config.toml")))?, &base)?,
    };
    let out = out_dir(g, "fit")?;
    std::fs::create_dir_all(out.join("ckpt"))?;
    let cfg = state.config.clone();
    let pc = cfg.training_cameras()[0];
    let preview = (pc, 0, recorded_poses(&state.avatar, &rec)?.swap_remove(0));
    let mut files = FitFiles {
        steps: JsonLines::open(&out.join("steps.jsonl"), resume)?,
        evals: JsonLines::open(&out.join("evals.jsonl"), resume)?,
        densify: JsonLines::open(&out.join("densify.jsonl"), resume)?,
        out: out.clone(),
        preview,
        last: None,
    };
    write_json(&out.join("config.json"), &cfg)?;
    let total = a.steps.map_or(cfg.fit.steps, |s| s.min(cfg.fit.steps));
    let every = cfg.fit.checkpoint_every;
    while state.step < total {
        let next = ((state.step / every + 1) * every).min(total);
        run_fit(&mut state, &rec, next, &mut files)?;
        save_fit(&out.join("ckpt").join(format!("step{:06}.ckpt", state.step)), &state)?;
    }
    save_fit(&out.join("fit.ckpt"), &state)?;
    println!("wrote {}", out.join("fit.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

fn load_split(data: &Path, split: &str) -> Result<Vec<SequenceData>> {
    list_sequences(data, split)?.iter().map(|p| SequenceData::load(p).map_err(Into::into)).collect()
}

struct SeqFiles(JsonLines);

impl SeqObserver for SeqFiles {
    fn on_step(&mut self, _state: &SeqState, log: &SeqStepLog) -> splatrig::Result<()> {
        println!("step {:>6}  {:?}  vertices {:?}  photo {:?}", log.step, log.phase, log.vertices, log.photo);
        Ok(())
    }
}

pub fn train_seq(g: &Global, a: &SeqArgs) -> Result<ExitCode> {
    let Some(ckpt) = &g.ckpt else { bail!("train-seq needs --ckpt (a fitted avatar or a sequence checkpoint to resume)") };
    let base = load_mesh(&a.data.join("mesh.obj"))?;
    let train = load_split(&a.data, "train")?;
    let Some(first) = train.first() else { bail!("no training sequences under {}", a.data.join("train").display()) };
    let kind = Container::read(ckpt)?.kind().to_string();
    let resume = kind == "seq";
    let mut state = if resume {
        no_overrides(g, "resuming sequence training")?;
        load_seq(ckpt)?
    } else {
        let (stored, avatar) = load_avatar(ckpt)?;
        let cfg = if g.config.is_some() { run_config(g, None)? } else { override_only(g, stored)? };
        SeqState::new(cfg, avatar, first.features.dim)?
    };
    let out = out_dir(g, "seq")?;
    let train_samples = samples(&state, &base, &train)?;
    let mut files = SeqFiles(JsonLines::open(&out.join("seq_steps.jsonl"), resume)?);
    let until = a.steps.map_or(u64::MAX, |s| state.trainer.step + s);
    let logs = train_sequence(&mut state, &train_samples, until, &mut files)?;
    for l in &logs {
        files.0.push(l)?;
    }
    save_seq(&out.join("seq.ckpt"), &state)?;
    let val = load_split(&a.data, "val")?;
    let (split, eval_on) = if val.is_empty() { ("train", train_samples) } else { ("val", samples(&state, &base, &val)?) };
    let report = evaluate_sequences(&state, &eval_on, state.config.holdout())?;
    #[derive(Serialize)]
    struct Report<'a> {
        split: &'a str,
        camera: usize,
        step: u64,
        #[serde(flatten)]
        eval: splatrig::engine::SeqEval,
    }
    let r = Report { split, camera: state.config.holdout(), step: state.trainer.step, eval: report };
    write_json(&out.join("seq_eval.json"), &r)?;
    println!("{}", json(&r)?);
    Ok(ExitCode::SUCCESS)
}

fn override_only(g: &Global, mut cfg: RunConfig) -> Result<RunConfig> {
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(h) = g.holdout_camera {
        cfg.holdout_camera = Some(h);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The avatar of any checkpoint, plus the sequence state when it has one.
fn load_any(path: &Path) -> Result<(RunConfig, Avatar, Option<SeqState>)> {
    if Container::read(path)?.kind() == "seq" {
        let st = load_seq(path)?;
        Ok((st.config.clone(), st.avatar.clone(), Some(st)))
    } else {
        let (c, av) = load_avatar(path)?;
        Ok((c, av, None))
    }
}

fn poses(source: Source, avatar: &Avatar, seq: Option<&SeqState>, recording: &Path) -> Result<Vec<FramePose>> {
    Ok(match source {
        Source::Neutral => vec![neutral_pose(avatar)],
        Source::Recorded => recorded_poses(avatar, &SequenceData::load(recording)?)?,
        Source::Predicted => {
            let Some(st) = seq else { bail!("predicted expressions need a sequence checkpoint") };
            predicted_poses(st, &SequenceData::load(recording)?)?
        }
    })
}

fn expr_source(s: Source) -> ExprSource {
    match s {
        Source::Neutral => ExprSource::Neutral,
        Source::Recorded => ExprSource::Recorded,
        Source::Predicted => ExprSource::Predicted,
    }
}

pub fn render(g: &Global, a: &RenderArgs) -> Result<ExitCode> {
    let Some(ckpt) = &g.ckpt else { bail!("render needs --ckpt") };
    let (cfg, avatar, seq) = load_any(ckpt)?;
    let recording = a.sequence.clone().unwrap_or_else(|| a.data.join("avatar"));
    let mut frames: Vec<(usize, FramePose)> = poses(a.source, &avatar, seq.as_ref(), &recording)?.into_iter().enumerate().collect();
    if let Some(f) = a.frame {
        if f >= frames.len() {
            bail!("frame {f} of a {}-frame source", frames.len());
        }
        frames = vec![frames.swap_remove(f)];
    }
    let cams = match a.orbit {
        Some(0) => bail!("an orbit needs at least one view"),
        Some(n) => orbit(&cfg.scene.cameras, n),
        None => {
            let rig = cfg.scene.cameras.build();
            if a.cameras.is_empty() {
                rig
            } else {
                a.cameras
                    .iter()
                    .map(|&c| rig.get(c).cloned().with_context(|| format!("camera {c} of {}", rig.len())))
                    .collect::<Result<_>>()?
            }
        }
    };
    let out = out_dir(g, "renders")?;
    let paths = render_views(&avatar, &cams, &frames, &a.name, &out)?;
    println!("wrote {} images to {}", paths.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn metrics(g: &Global, a: &MetricsArgs) -> Result<ExitCode> {
    let Some(ckpt) = &g.ckpt else { bail!("metrics needs --ckpt") };
    let (cfg, avatar, seq) = load_any(ckpt)?;
    let recording = a.sequence.clone().unwrap_or_else(|| a.data.join("avatar"));
    let data = SequenceData::load(&recording)?;
    let camera = g.holdout_camera.unwrap_or_else(|| cfg.holdout());
    let p = poses(a.source, &avatar, seq.as_ref(), &recording)?;
    let p = if a.source == Source::Neutral { vec![p[0].clone(); data.frames] } else { p };
    let report = image_metrics(&avatar, &data, &p, camera, expr_source(a.source))?;
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("metrics.json"), &report)?;
    }
    println!("{}", json(&report)?);
    Ok(ExitCode::SUCCESS)
}

pub fn check_grad(g: &Global, a: &GradArgs) -> Result<ExitCode> {
    let suites = select(&a.component)?;
    let fault = a.inject.map(|f| match f {
        FaultArg::FlipSign => Fault::FlipSign,
    });
    let first = g.seed.unwrap_or(0);
    println!("{:<9} {:<20} {:>7} {:>9} {:>10} {:>6} {:>8}  {:<28} result", "component", "suite", "step", "tolerance", "worst", "seed", "redraws", "group");
    let mut rows: Vec<SuiteSummary> = Vec::with_capacity(suites.len());
    for s in &suites {
        let r = summarize(s, first, a.seeds, fault)?;
        println!(
            "{:<9} {:<20} {:>7.0e} {:>9.0e} {:>10.3e} {:>6} {:>8}  {:<28} {}",
            r.component,
            r.suite,
            r.step,
            r.tolerance,
            r.worst_err,
            r.worst_seed,
            r.redraws,
            r.worst_group,
            if r.passed() { "pass" } else { "FAIL" }
        );
        rows.push(r);
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} of {} suites passed over {} seeds", rows.len() - failed, rows.len(), a.seeds);
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("check_grad.json"), &rows)?;
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

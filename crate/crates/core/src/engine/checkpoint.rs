//! Versioned checkpoint container.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` header length,
//! UTF-8 JSON header, then every array of the header manifest as `f64`s in
//! manifest order. The mesh lives next to the checkpoint and is tied to it by
//! its content hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::avatar::Avatar;
use super::config::RunConfig;
use super::fit::FitState;
use super::synth::{SceneScripts, TruthAvatar, TruthDetail};
use crate::color::{ColorModel, COLOR_HIDDEN};
use crate::density::GradStats;
use crate::error::{Error, Result};
use crate::mesh::{load_mesh, save_mesh, BlendMesh};
use crate::sequence::{SeqTrainer, SequenceModel};
use crate::splats::{RiggedGaussianSet, SplatAdam};
use crate::tensor::{Adam, AdamConfig, AdamSlot, ParamSet};

pub const CKPT_MAGIC: [u8; 8] = *b"SPLATRIG";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Option<RunConfig>,
    mesh_file: String,
    mesh_hash: String,
    counters: BTreeMap<String, u64>,
    ints: BTreeMap<String, Vec<usize>>,
    arrays: Vec<(String, usize)>,
    extra: BTreeMap<String, serde_json::Value>,
}

/// In-memory checkpoint: a JSON header plus named `f64` arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    header: Header,
    data: BTreeMap<String, Vec<f64>>,
}

fn bad(what: &Path, detail: impl Into<String>) -> Error {
    Error::format(what.display().to_string(), detail)
}

impl Container {
    fn new(kind: &str) -> Self {
        Self { header: Header { kind: kind.into(), ..Header::default() }, data: BTreeMap::new() }
    }

    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    pub fn config(&self) -> Option<&RunConfig> {
        self.header.config.as_ref()
    }

    fn put(&mut self, name: impl Into<String>, v: Vec<f64>) {
        let name = name.into();
        self.header.arrays.push((name.clone(), v.len()));
        self.data.insert(name, v);
    }

    fn put_count(&mut self, name: impl Into<String>, v: u64) {
        self.header.counters.insert(name.into(), v);
    }

    fn array(&self, name: &str) -> Result<&[f64]> {
        self.data.get(name).map(Vec::as_slice).ok_or_else(|| Error::format("checkpoint", format!("missing array {name}")))
    }

    fn count(&self, name: &str) -> Result<u64> {
        self.header.counters.get(name).copied().ok_or_else(|| Error::format("checkpoint", format!("missing counter {name}")))
    }

    fn ints(&self, name: &str) -> Result<&[usize]> {
        self.header.ints.get(name).map(Vec::as_slice).ok_or_else(|| Error::format("checkpoint", format!("missing index list {name}")))
    }

    fn extra<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let v = self.header.extra.get(name).ok_or_else(|| Error::format("checkpoint", format!("missing section {name}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))
    }

    fn put_extra<T: Serialize>(&mut self, name: &str, v: &T) {
        self.header.extra.insert(name.into(), serde_json::to_value(v).expect("section serializes"));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| bad(path, e.to_string()))?;
        let total: usize = self.header.arrays.iter().map(|(_, n)| n).sum();
        let mut buf = Vec::with_capacity(20 + header.len() + 8 * total);
        buf.extend_from_slice(&CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (name, _) in &self.header.arrays {
            for v in &self.data[name] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || bytes[..8] != CKPT_MAGIC {
            return Err(bad(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(bad(path, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(path, e.to_string()))?;
        let total: usize = header.arrays.iter().map(|(_, n)| n).sum();
        if bytes.len() - body != 8 * total {
            return Err(bad(path, format!("payload holds {} bytes, manifest needs {}", bytes.len() - body, 8 * total)));
        }
        let mut data = BTreeMap::new();
        let mut at = body;
        for (name, n) in &header.arrays {
            let v = bytes[at..at + 8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            data.insert(name.clone(), v);
            at += 8 * n;
        }
        Ok(Self { header, data })
    }

    fn put_mesh(&mut self, ckpt: &Path, mesh: &BlendMesh) -> Result<()> {
        let name = format!("{}.mesh.obj", ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint"));
        let dir = ckpt.parent().filter(|d| !d.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_mesh(mesh, &dir.join(&name))?;
        self.header.mesh_file = name;
        self.header.mesh_hash = mesh.content_hash();
        Ok(())
    }

    fn mesh(&self, ckpt: &Path) -> Result<BlendMesh> {
        let dir = ckpt.parent().filter(|d| !d.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        let mesh = load_mesh(&dir.join(&self.header.mesh_file))?;
        if mesh.content_hash() != self.header.mesh_hash {
            return Err(bad(ckpt, format!("mesh {} does not match the recorded hash", self.header.mesh_file)));
        }
        Ok(mesh)
    }

    fn put_set(&mut self, p: &str, s: &RiggedGaussianSet) {
        self.put(format!("{p}.mu_local"), s.mu_local.iter().flatten().copied().collect());
        self.put(format!("{p}.q_local"), s.q_local.iter().flatten().copied().collect());
        self.put(format!("{p}.log_s"), s.log_s.iter().flatten().copied().collect());
        self.put(format!("{p}.opacity_logit"), s.opacity_logit.clone());
        self.put(format!("{p}.latent"), s.latent.clone());
        if let Some(rgb) = &s.static_rgb {
            self.put(format!("{p}.static_rgb"), rgb.iter().flatten().copied().collect());
        }
        self.put_count(format!("{p}.latent_dim"), s.latent_dim as u64);
        self.header.ints.insert(format!("{p}.parent_face"), s.parent_face.clone());
    }

    fn set(&self, p: &str, faces: usize) -> Result<RiggedGaussianSet> {
        let v3 = |a: &[f64]| a.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let set = RiggedGaussianSet {
            mu_local: v3(self.array(&format!("{p}.mu_local"))?),
            q_local: self.array(&format!("{p}.q_local"))?.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            log_s: v3(self.array(&format!("{p}.log_s"))?),
            opacity_logit: self.array(&format!("{p}.opacity_logit"))?.to_vec(),
            latent: self.array(&format!("{p}.latent"))?.to_vec(),
            latent_dim: self.count(&format!("{p}.latent_dim"))? as usize,
            parent_face: self.ints(&format!("{p}.parent_face"))?.to_vec(),
            static_rgb: self.data.get(&format!("{p}.static_rgb")).map(|a| v3(a)),
        };
        set.validate(faces)?;
        Ok(set)
    }

    fn put_params(&mut self, p: &str, ps: &ParamSet) {
        for (n, t) in ps.names().iter().zip(ps.tensors()) {
            self.put(format!("{p}/{n}"), t.data().to_vec());
        }
    }

    /// Overwrites a freshly built `ps` with stored values, checking sizes.
    fn params(&self, p: &str, ps: &mut ParamSet) -> Result<()> {
        let names = ps.names().to_vec();
        for (n, t) in names.iter().zip(ps.tensors_mut()) {
            let a = self.array(&format!("{p}/{n}"))?;
            if a.len() != t.numel() {
                return Err(Error::format("checkpoint", format!("{p}/{n}: {} values for {:?}", a.len(), t.shape())));
            }
            t.data_mut().copy_from_slice(a);
        }
        Ok(())
    }

    fn put_slot(&mut self, p: &str, s: &AdamSlot) {
        self.put(format!("{p}.m"), s.m.clone());
        self.put(format!("{p}.v"), s.v.clone());
        self.put_count(format!("{p}.t"), s.t);
    }

    fn slot(&self, p: &str) -> Result<AdamSlot> {
        Ok(AdamSlot { m: self.array(&format!("{p}.m"))?.to_vec(), v: self.array(&format!("{p}.v"))?.to_vec(), t: self.count(&format!("{p}.t"))? })
    }

    fn put_adam(&mut self, p: &str, a: &Adam) {
        self.put_extra(&format!("{p}.config"), &a.config);
        for (i, s) in a.slots.iter().enumerate() {
            self.put_slot(&format!("{p}.{i}"), s);
        }
    }

    fn adam(&self, p: &str, params: &ParamSet) -> Result<Adam> {
        let config: AdamConfig = self.extra(&format!("{p}.config"))?;
        let slots = (0..params.len()).map(|i| self.slot(&format!("{p}.{i}"))).collect::<Result<_>>()?;
        Ok(Adam { config, slots })
    }

    fn put_avatar(&mut self, path: &Path, av: &Avatar, hidden: usize) -> Result<()> {
        self.put_mesh(path, &av.mesh)?;
        self.put_set("set", &av.set);
        self.put_params("color", &av.color.params);
        self.put_count("color_hidden", hidden as u64);
        Ok(())
    }

    fn avatar(&self, path: &Path) -> Result<Avatar> {
        let mesh = self.mesh(path)?;
        let set = self.set("set", mesh.face_count())?;
        let hidden = self.count("color_hidden")? as usize;
        let mut color = ColorModel::new(mesh.expr_dim, set.latent_dim, hidden, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        self.params("color", &mut color.params)?;
        Ok(Avatar { mesh, set, color })
    }
}

fn color_hidden(av: &Avatar) -> usize {
    av.color.mlp.layers[0].fan_out
}

pub fn save_fit(path: &Path, st: &FitState) -> Result<()> {
    let mut c = Container::new("fit");
    c.header.config = Some(st.config.clone());
    c.put_avatar(path, &st.avatar, color_hidden(&st.avatar))?;
    let a = &st.adam;
    for (n, s) in [("adam.mu", &a.mu_local), ("adam.q", &a.q_local), ("adam.log_s", &a.log_s), ("adam.opacity", &a.opacity_logit), ("adam.latent", &a.latent)] {
        c.put_slot(n, s);
    }
    c.put_adam("color_adam", &st.color_adam);
    c.put("stats.norm_sum", st.stats.norm_sum.clone());
    c.put("stats.dir_sum", st.stats.dir_sum.iter().flatten().copied().collect());
    c.header.ints.insert("stats.count".into(), st.stats.count.iter().map(|&v| v as usize).collect());
    c.put_count("step", st.step);
    c.write(path)
}

pub fn load_fit(path: &Path) -> Result<FitState> {
    let c = Container::read(path)?;
    if c.kind() != "fit" {
        return Err(bad(path, format!("expected a fit checkpoint, found {:?}", c.kind())));
    }
    let config = c.config().cloned().ok_or_else(|| bad(path, "missing config"))?;
    let avatar = c.avatar(path)?;
    let adam = SplatAdam {
        mu_local: c.slot("adam.mu")?,
        q_local: c.slot("adam.q")?,
        log_s: c.slot("adam.log_s")?,
        opacity_logit: c.slot("adam.opacity")?,
        latent: c.slot("adam.latent")?,
    };
    let color_adam = c.adam("color_adam", &avatar.color.params)?;
    let stats = GradStats {
        norm_sum: c.array("stats.norm_sum")?.to_vec(),
        dir_sum: c.array("stats.dir_sum")?.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect(),
        count: c.ints("stats.count")?.iter().map(|&v| v as u64).collect(),
    };
    Ok(FitState { config, avatar, adam, color_adam, stats, step: c.count("step")? })
}

/// Loads the avatar of a fit or sequence checkpoint.
pub fn load_avatar(path: &Path) -> Result<(RunConfig, Avatar)> {
    let c = Container::read(path)?;
    let config = c.config().cloned().ok_or_else(|| bad(path, "missing config"))?;
    Ok((config, c.avatar(path)?))
}

/// Sequence-stage state: the driven avatar, the sequence model and its optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqState {
    pub config: RunConfig,
    pub avatar: Avatar,
    pub model: SequenceModel,
    pub trainer: SeqTrainer,
}

pub fn save_seq(path: &Path, st: &SeqState) -> Result<()> {
    let mut c = Container::new("seq");
    c.header.config = Some(st.config.clone());
    c.put_avatar(path, &st.avatar, color_hidden(&st.avatar))?;
    c.put_extra("seq_model", &st.model.config);
    for (n, ps) in st.model.param_sets() {
        c.put_params(&format!("model.{n}"), ps);
    }
    let t = &st.trainer;
    c.put_extra("seq_train", &t.config);
    for (n, a) in [("lip", &t.lip), ("wrinkle", &t.wrinkle), ("expr", &t.expr), ("e2l", &t.e2l), ("decoder", &t.decoder), ("color", &t.color)] {
        c.put_adam(&format!("opt.{n}"), a);
    }
    c.put_slot("opt.latent", &t.latent);
    c.put_count("steps_a", t.steps_a);
    c.put_count("steps_b", t.steps_b);
    c.put_count("step", t.step);
    c.write(path)
}

pub fn load_seq(path: &Path) -> Result<SeqState> {
    let c = Container::read(path)?;
    if c.kind() != "seq" {
        return Err(bad(path, format!("expected a sequence checkpoint, found {:?}", c.kind())));
    }
    let config = c.config().cloned().ok_or_else(|| bad(path, "missing config"))?;
    let avatar = c.avatar(path)?;
    let mut model = SequenceModel::new(c.extra("seq_model")?, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    for (n, ps) in model.param_sets_mut() {
        c.params(&format!("model.{n}"), ps)?;
    }
    let mut trainer = SeqTrainer::new(c.extra("seq_train")?, &model, &avatar.color, &avatar.set);
    trainer.lip = c.adam("opt.lip", &model.lip.params)?;
    trainer.wrinkle = c.adam("opt.wrinkle", &model.wrinkle.params)?;
    trainer.expr = c.adam("opt.expr", &model.expr.params)?;
    trainer.e2l = c.adam("opt.e2l", &model.e2l.params)?;
    trainer.decoder = c.adam("opt.decoder", &model.decoder.params)?;
    trainer.color = c.adam("opt.color", &avatar.color.params)?;
    trainer.latent = c.slot("opt.latent")?;
    trainer.steps_a = c.count("steps_a")?;
    trainer.steps_b = c.count("steps_b")?;
    trainer.step = c.count("step")?;
    Ok(SeqState { config, avatar, model, trainer })
}

/// Archives the truth avatar, its detail layer and the scripts in `dir/truth.ckpt`.
pub fn save_truth(dir: &Path, cfg: &RunConfig, truth: &TruthAvatar, scripts: &SceneScripts) -> Result<()> {
    let path = dir.join("truth.ckpt");
    let mut c = Container::new("truth");
    c.header.config = Some(cfg.clone());
    c.put_avatar(&path, &truth.avatar, COLOR_HIDDEN)?;
    c.put_extra("detail", &truth.detail);
    c.put_extra("scripts", scripts);
    c.write(&path)
}

pub fn load_truth(dir: &Path) -> Result<(TruthAvatar, SceneScripts)> {
    let path = dir.join("truth.ckpt");
    let c = Container::read(&path)?;
    if c.kind() != "truth" {
        return Err(bad(&path, format!("expected a truth archive, found {:?}", c.kind())));
    }
    let avatar = c.avatar(&path)?;
    let detail: TruthDetail = c.extra("detail")?;
    if detail.stripe.len() != avatar.set.len() || detail.band.len() != avatar.set.len() {
        return Err(bad(&path, "detail layer does not match the splat count"));
    }
    Ok((TruthAvatar { avatar, detail }, c.extra("scripts")?))
}

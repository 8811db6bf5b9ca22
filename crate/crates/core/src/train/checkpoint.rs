//! Training snapshots.
//!
//! Layout (little endian): `CSDC`, u32 version, u32-length UTF-8 config text
//! (`key=value` lines), u32 tensor count, then per tensor a u32-length name
//! and a tensor block; u32 optimizer count, then per optimizer a u32-length
//! role, u64 step, u32 slot count and per slot the `m` and `v` moments as
//! u32-length f32 arrays; finally the u64 iteration.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{read_tensor, write_tensor, OptState, Optimizer, OptimizerConfig, ParamStore, Tensor};
use crate::error::{CsdError, Result};
use crate::model::{Discriminator, DiscriminatorConfig, EnhanceModel, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSDC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: EnhanceModel,
    pub optimizer: Optimizer,
    pub disc: Option<(Discriminator, Optimizer)>,
    /// Completed iterations.
    pub iteration: u64,
    /// Extra `key=value` settings stored alongside the model description.
    pub settings: Vec<(String, String)>,
}

pub fn optimizer_pairs(cfg: &OptimizerConfig) -> Vec<(String, String)> {
    vec![
        ("optim.kind".into(), cfg.kind.to_string()),
        ("optim.lr".into(), cfg.lr.to_string()),
        ("optim.beta1".into(), cfg.beta1.to_string()),
        ("optim.beta2".into(), cfg.beta2.to_string()),
        ("optim.eps".into(), cfg.eps.to_string()),
    ]
}

/// Sets one optimizer field; `false` for keys outside `optim.`.
pub fn set_optimizer(cfg: &mut OptimizerConfig, key: &str, value: &str) -> Result<bool> {
    let Some(field) = key.strip_prefix("optim.") else {
        return Ok(false);
    };
    let num = |v: &str| v.parse::<f32>().map_err(|e| CsdError::Config(format!("{key}: {e}")));
    match field {
        "kind" => cfg.kind = value.parse()?,
        "lr" => cfg.lr = num(value)?,
        "beta1" => cfg.beta1 = num(value)?,
        "beta2" => cfg.beta2 = num(value)?,
        "eps" => cfg.eps = num(value)?,
        _ => return Err(CsdError::Config(format!("unknown key `{key}`"))),
    }
    Ok(true)
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: usize) -> std::io::Result<()> {
        let v = u32::try_from(v).map_err(|_| std::io::Error::other("length exceeds u32"))?;
        self.0.write_all(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }

    fn text(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len())?;
        self.0.write_all(s.as_bytes())
    }

    fn floats(&mut self, v: &[f32]) -> std::io::Result<()> {
        self.u32(v.len())?;
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.0.write_all(&bytes)
    }
}

/// Byte reader that reports the offset of the first failure.
struct Reader<'a, R: Read> {
    inner: R,
    pos: usize,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(CsdError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => {
                self.pos += n;
                Ok(buf)
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => self.fail("truncated checkpoint"),
            Err(e) => Err(CsdError::io(self.path, e)),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()?;
        let at = self.pos;
        let b = self.bytes(n)?;
        String::from_utf8(b).or_else(|_| {
            self.pos = at;
            self.fail("invalid UTF-8 text")
        })
    }

    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()?;
        let b = self.bytes(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let mut counted = CountingRead {
            inner: &mut self.inner,
            count: 0,
        };
        let out = read_tensor(&mut counted);
        let used = counted.count;
        self.pos += used;
        out.or_else(|e| {
            self.pos = at;
            self.fail(format!("tensor block: {e}"))
        })
    }
}

struct CountingRead<'a, R: Read> {
    inner: &'a mut R,
    count: usize,
}

impl<R: Read> Read for CountingRead<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count += n;
        Ok(n)
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CsdError::Config(format!("checkpoint config line `{l}` is not key=value")))
        })
        .collect()
}

/// Copies every tensor named in `store` out of `tensors`, checking shapes.
fn fill_store(store: &mut ParamStore, tensors: &mut HashMap<String, Tensor>) -> Result<()> {
    for e in store.entries_mut() {
        let t = tensors
            .remove(&e.name)
            .ok_or_else(|| CsdError::Config(format!("checkpoint lacks tensor `{}`", e.name)))?;
        if t.shape() != e.value.shape() {
            return Err(CsdError::ShapeMismatch {
                op: "checkpoint",
                left: e.value.shape().0,
                right: t.shape().0,
            });
        }
        e.value = t;
    }
    Ok(())
}

fn state_matches(state: &OptState, store: &ParamStore) -> bool {
    let fresh = OptState::for_store(store);
    let lens = |s: &OptState| s.m.iter().chain(&s.v).map(Vec::len).collect::<Vec<_>>();
    lens(state) == lens(&fresh)
}

impl Checkpoint {
    fn config_text(&self) -> String {
        let mut pairs = self.model.config().to_pairs();
        pairs.extend(optimizer_pairs(&self.optimizer.config));
        if let Some((d, _)) = &self.disc {
            pairs.extend(d.config().to_pairs());
        }
        pairs.extend(self.settings.iter().cloned());
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write_to<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = Writer(out);
        w.0.write_all(CHECKPOINT_MAGIC)?;
        w.0.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.text(&self.config_text())?;
        let stores: Vec<&ParamStore> = std::iter::once(self.model.store())
            .chain(self.disc.as_ref().map(|(d, _)| d.store()))
            .collect();
        w.u32(stores.iter().map(|s| s.len()).sum())?;
        for s in &stores {
            for e in s.entries() {
                w.text(&e.name)?;
                write_tensor(&mut w.0, &e.value)?;
            }
        }
        let opts: Vec<(&str, &Optimizer)> = std::iter::once(("generator", &self.optimizer))
            .chain(self.disc.as_ref().map(|(_, o)| ("discriminator", o)))
            .collect();
        w.u32(opts.len())?;
        for (role, o) in opts {
            w.text(role)?;
            w.u64(o.state.step)?;
            w.u32(o.state.m.len())?;
            for (m, v) in o.state.m.iter().zip(&o.state.v) {
                w.floats(m)?;
                w.floats(v)?;
            }
        }
        w.u64(self.iteration)?;
        w.0.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| CsdError::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| CsdError::io(path, e))
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn read_from<R: Read>(input: R, path: &Path) -> Result<Self> {
        let mut r = Reader { inner: input, pos: 0, path };
        if r.bytes(4)? != CHECKPOINT_MAGIC {
            r.pos = 0;
            return r.fail("not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            r.pos -= 4;
            return r.fail(format!("unsupported checkpoint version {version}"));
        }
        let pairs = parse_pairs(&r.text()?)?;
        let mut model_cfg = ModelConfig::default();
        let mut opt_cfg = OptimizerConfig::default();
        let mut disc_cfg = DiscriminatorConfig::default();
        let mut has_disc = false;
        let mut settings = Vec::new();
        for (k, v) in &pairs {
            if model_cfg.set(k, v)? || set_optimizer(&mut opt_cfg, k, v)? {
                continue;
            }
            if disc_cfg.set(k, v)? {
                has_disc = true;
                continue;
            }
            settings.push((k.clone(), v.clone()));
        }
        model_cfg.validate()?;
        let mut model = EnhanceModel::build(&model_cfg, 0)?;
        let mut disc = has_disc.then(|| Discriminator::build(&disc_cfg, 0)).transpose()?;

        let count = r.u32()?;
        let mut tensors = HashMap::with_capacity(count);
        for _ in 0..count {
            let name = r.text()?;
            let t = r.tensor()?;
            if tensors.insert(name.clone(), t).is_some() {
                return r.fail(format!("duplicate tensor `{name}`"));
            }
        }
        fill_store(model.store_mut(), &mut tensors)?;
        if let Some(d) = &mut disc {
            fill_store(d.store_mut(), &mut tensors)?;
        }
        if let Some(name) = tensors.keys().next() {
            return Err(CsdError::Config(format!("checkpoint has unexpected tensor `{name}`")));
        }

        let n_opts = r.u32()?;
        let mut states = HashMap::new();
        for _ in 0..n_opts {
            let role = r.text()?;
            let step = r.u64()?;
            let slots = r.u32()?;
            let mut state = OptState {
                step,
                ..Default::default()
            };
            for _ in 0..slots {
                state.m.push(r.floats()?);
                state.v.push(r.floats()?);
            }
            states.insert(role, state);
        }
        let iteration = r.u64()?;

        let mut take = |role: &str, store: &ParamStore| -> Result<Optimizer> {
            let state = states
                .remove(role)
                .ok_or_else(|| CsdError::Config(format!("checkpoint lacks {role} optimizer state")))?;
            if !state_matches(&state, store) {
                return Err(CsdError::Config(format!("{role} optimizer state does not match the network")));
            }
            Ok(Optimizer {
                config: opt_cfg,
                state,
            })
        };
        let optimizer = take("generator", model.store())?;
        let disc = match disc {
            Some(d) => {
                let o = take("discriminator", d.store())?;
                Some((d, o))
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            optimizer,
            disc,
            iteration,
            settings,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| CsdError::io(path, e))?;
        Checkpoint::read_from(BufReader::new(file), path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn lite(variant: Variant) -> ModelConfig {
        ModelConfig {
            channel_plan: vec![4; 9],
            ..ModelConfig::for_variant(variant)
        }
    }

    fn roundtrip(ck: &Checkpoint) -> Checkpoint {
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        Checkpoint::read_from(buf.as_slice(), Path::new("mem")).unwrap()
    }

    #[test]
    fn bit_exact_roundtrip() {
        let model = EnhanceModel::build(&lite(Variant::ArcE), 7).unwrap();
        let mut optimizer = Optimizer::new(OptimizerConfig::default(), model.store());
        optimizer.state.step = 3;
        optimizer.state.m[0][0] = 0.25;
        let disc = Discriminator::build(&DiscriminatorConfig::default(), 8).unwrap();
        let dopt = Optimizer::new(OptimizerConfig::default(), disc.store());
        let ck = Checkpoint {
            model,
            optimizer,
            disc: Some((disc, dopt)),
            iteration: 42,
            settings: vec![("train.seed".into(), "5".into())],
        };
        let back = roundtrip(&ck);
        assert!(back.model.store().same_values(ck.model.store()));
        assert_eq!(back.model.config(), ck.model.config());
        assert_eq!(back.optimizer.state, ck.optimizer.state);
        assert_eq!(back.optimizer.config, ck.optimizer.config);
        let (d, o) = back.disc.as_ref().unwrap();
        assert!(d.store().same_values(ck.disc.as_ref().unwrap().0.store()));
        assert_eq!(o.state, ck.disc.as_ref().unwrap().1.state);
        assert_eq!(back.iteration, 42);
        assert_eq!(back.settings, ck.settings);
    }

    #[test]
    fn rejects_corruption() {
        let model = EnhanceModel::build(&lite(Variant::ArcB), 1).unwrap();
        let optimizer = Optimizer::new(OptimizerConfig::default(), model.store());
        let ck = Checkpoint {
            model,
            optimizer,
            disc: None,
            iteration: 0,
            settings: Vec::new(),
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let p = Path::new("mem");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(bad.as_slice(), p), Err(CsdError::Format { offset: 0, .. })));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(Checkpoint::read_from(short, p), Err(CsdError::Format { .. })));
        assert!(roundtrip(&ck).disc.is_none());
    }
}

//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  b"ANCHCKPT"
//! version      u32      1
//! iteration    u64
//! hash_len     u32, then hash_len bytes of UTF-8 config hash
//! n_params     u32
//! per param:
//!   name_len   u32, then name_len bytes of UTF-8 name
//!   flags      u8       bit 0 = trainable, bit 1 = weight decay
//!   rank       u32, then rank × u64 extents
//!   data       numel × f64
//! has_moments  u8       0 or 1
//! if 1, per param in the same order:
//!   first moment   numel × f64
//!   second moment  numel × f64
//! ```

use std::collections::HashMap;
use std::io::{self, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::kernel::{Graph, ParamId, Tensor, Var};

const MAGIC: &[u8; 8] = b"ANCHCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0}")]
    Duplicate(String),
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("checkpoint parameter {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `±sqrt(1/fan_in)` style bounds.
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        decay: bool,
    ) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
            decay,
        });
        Ok(id)
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        decay: bool,
        rng: &mut impl Rng,
    ) -> Result<ParamId, ParamError> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
        };
        self.insert(name, Tensor::new(shape, data).expect("shape"), decay)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Marks parameters trainable or frozen according to `pred(name)`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records `id` as a graph leaf borrowing the stored value.
    pub fn var<'a>(&'a self, g: &mut Graph<'a>, id: ParamId) -> Var {
        let p = &self.params[id.0];
        g.param(id, &p.value, p.trainable)
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect()
    }
}

/// Parameters plus the optimiser state saved alongside them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_hash: String,
    pub params: ParamStore,
    /// First and second moment per parameter, in store order.
    pub moments: Option<Vec<(Tensor, Tensor)>>,
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_f64s(w: &mut impl Write, data: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ParamError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32, ParamError> {
    Ok(u32::from_le_bytes(get_bytes(r)?))
}

fn get_str(r: &mut impl Read) -> Result<String, ParamError> {
    let len = get_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| ParamError::Malformed(e.to_string()))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, ParamError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        w.write_all(&self.iteration.to_le_bytes())?;
        put_str(w, &self.config_hash)?;
        put_u32(w, self.params.len() as u32)?;
        for (_, p) in self.params.iter() {
            put_str(w, &p.name)?;
            w.write_all(&[u8::from(p.trainable) | (u8::from(p.decay) << 1)])?;
            put_u32(w, p.value.shape().len() as u32)?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            put_f64s(w, p.value.data())?;
        }
        match &self.moments {
            None => w.write_all(&[0]),
            Some(moments) => {
                w.write_all(&[1])?;
                for (m, v) in moments {
                    put_f64s(w, m.data())?;
                    put_f64s(w, v.data())?;
                }
                Ok(())
            }
        }
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ParamError> {
        if &get_bytes::<8>(r)? != MAGIC {
            return Err(ParamError::Malformed("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(ParamError::Malformed(format!("version {version}")));
        }
        let iteration = u64::from_le_bytes(get_bytes(r)?);
        let config_hash = get_str(r)?;
        let n = get_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = get_str(r)?;
            let [flags] = get_bytes::<1>(r)?;
            let rank = get_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(get_bytes(r)?) as usize);
            }
            let numel = shape.iter().product();
            let data = get_f64s(r, numel)?;
            let id = params.insert(
                name,
                Tensor::new(&shape, data).map_err(|e| ParamError::Malformed(e.to_string()))?,
                flags & 2 != 0,
            )?;
            params.get_mut(id).trainable = flags & 1 != 0;
        }
        let [has_moments] = get_bytes::<1>(r)?;
        let moments = if has_moments == 1 {
            let mut out = Vec::with_capacity(n);
            for (_, p) in params.iter() {
                let shape = p.value.shape();
                let m = get_f64s(r, p.value.numel())?;
                let v = get_f64s(r, p.value.numel())?;
                out.push((
                    Tensor::new(shape, m).expect("shape"),
                    Tensor::new(shape, v).expect("shape"),
                ));
            }
            Some(out)
        } else {
            None
        };
        Ok(Self {
            iteration,
            config_hash,
            params,
            moments,
        })
    }

    /// Copies values into `target`, which must hold the same names and shapes.
    pub fn restore_into(&self, target: &mut ParamStore) -> Result<(), ParamError> {
        for (_, p) in self.params.iter() {
            let id = target
                .id(&p.name)
                .ok_or_else(|| ParamError::Unknown(p.name.clone()))?;
            let dst = target.get_mut(id);
            if dst.value.shape() != p.value.shape() {
                return Err(ParamError::Shape {
                    name: p.name.clone(),
                    expected: dst.value.shape().to_vec(),
                    found: p.value.shape().to_vec(),
                });
            }
            dst.value = p.value.clone();
            dst.trainable = p.trainable;
        }
        if target.len() != self.params.len() {
            return Err(ParamError::Malformed(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                target.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store
            .init("a.weight", &[3, 4], Init::Normal(0.5), true, &mut rng)
            .unwrap();
        store.init("a.bias", &[4], Init::Zeros, false, &mut rng).unwrap();
        store.get_mut(ParamId(1)).trainable = false;
        let ck = Checkpoint {
            iteration: 17,
            config_hash: "abc123".into(),
            moments: Some(
                store
                    .iter()
                    .map(|(_, p)| (p.value.clone(), Tensor::full(p.value.shape(), 2.0)))
                    .collect(),
            ),
            params: store,
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.iteration, 17);
        assert_eq!(back.config_hash, "abc123");
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!((a.trainable, a.decay), (b.trainable, b.decay));
        }
        assert_eq!(ck.moments.unwrap()[0].1, back.moments.as_ref().unwrap()[0].1);

        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn bad_magic_and_duplicates() {
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT...."[..]).is_err());
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(&[1]), true).unwrap();
        assert!(matches!(
            store.insert("x", Tensor::zeros(&[1]), true),
            Err(ParamError::Duplicate(_))
        ));
    }
}

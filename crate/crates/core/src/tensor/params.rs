use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::array::{NdArray, Real};
use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ASTSEDPT";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_F32: u8 = 2;

/// Named parameter arrays plus gradient slots aligned with them.
///
/// Paths are unique and kept sorted, so iteration order (and therefore
/// serialization and gradient reduction order) is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    values: BTreeMap<String, NdArray>,
    grads: BTreeMap<String, NdArray>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: NdArray) -> Result<()> {
        let path = path.into();
        if self.values.contains_key(&path) {
            return Err(Error::Structure { path, detail: "duplicate parameter path".into() });
        }
        self.values.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&NdArray> {
        self.values.get(path)
    }

    pub fn set(&mut self, path: &str, value: NdArray) -> Result<()> {
        let slot = self.values.get_mut(path).ok_or_else(|| Error::Structure {
            path: path.to_string(),
            detail: "no such parameter".into(),
        })?;
        if slot.shape() != value.shape() {
            return Err(Error::Structure {
                path: path.to_string(),
                detail: format!("shape {:?} does not match {:?}", value.shape(), slot.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(NdArray::len).sum()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut NdArray)> {
        self.values.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Error naming the first path where the two trees differ in name or shape.
    pub fn check_same_structure(&self, other: &ParamTree) -> Result<()> {
        let mut a = self.values.iter();
        let mut b = other.values.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((pa, va)), Some((pb, vb))) => {
                    if pa != pb {
                        return Err(Error::Structure {
                            path: pa.min(pb).clone(),
                            detail: "present in only one tree".into(),
                        });
                    }
                    if va.shape() != vb.shape() {
                        return Err(Error::Structure {
                            path: pa.clone(),
                            detail: format!("shape {:?} vs {:?}", va.shape(), vb.shape()),
                        });
                    }
                }
                (Some((p, _)), None) | (None, Some((p, _))) => {
                    return Err(Error::Structure { path: p.clone(), detail: "present in only one tree".into() })
                }
            }
        }
    }

    pub fn grads(&self) -> &BTreeMap<String, NdArray> {
        &self.grads
    }

    pub fn has_grads(&self) -> bool {
        !self.grads.is_empty()
    }

    /// Installs gradients; `grads` must have exactly this tree's paths and shapes.
    pub fn set_grads(&mut self, grads: BTreeMap<String, NdArray>) -> Result<()> {
        let probe = ParamTree { values: grads, grads: BTreeMap::new() };
        self.check_same_structure(&probe)?;
        self.grads = probe.values;
        Ok(())
    }

    pub fn take_grads(&mut self) -> BTreeMap<String, NdArray> {
        std::mem::take(&mut self.grads)
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    /// Registers every leaf as a graph node.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (path, value) in &self.values {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            #[cfg(not(feature = "single-precision"))]
            out.push(DTYPE_F64);
            #[cfg(feature = "single-precision")]
            out.push(DTYPE_F32);
            out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| "truncated header")?;
        if &magic != MAGIC {
            return Err("not a parameter container".into());
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported container version {version}"));
        }
        let count = read_u32(&mut r)?;
        let mut tree = ParamTree::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let path = String::from_utf8(take(&mut r, len)?.to_vec()).map_err(|_| "path is not UTF-8")?;
            let dtype = take(&mut r, 1)?[0];
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                b.copy_from_slice(take(&mut r, 8)?);
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<Real> = match dtype {
                DTYPE_F64 => take(&mut r, n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                    .collect(),
                DTYPE_F32 => take(&mut r, n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                    .collect(),
                other => return Err(format!("unknown dtype tag {other} for `{path}`")),
            };
            let value = NdArray::new(shape, data).map_err(|e| e.to_string())?;
            tree.insert(path, value).map_err(|e| e.to_string())?;
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < n {
        return Err("truncated record".into());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().unwrap()))
}

/// Graph handles for the leaves of a [`ParamTree`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::Structure {
            path: path.to_string(),
            detail: "parameter missing from tree".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradient for every bound leaf; leaves the root does not depend on get zeros.
    pub fn collect(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, NdArray> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = grads.get(v).cloned().unwrap_or_else(|| NdArray::zeros(g.shape(v)));
                (k.clone(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("b.weight", NdArray::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap()).unwrap();
        t.insert("a.bias", NdArray::vector(vec![0.1, 0.2])).unwrap();
        t
    }

    #[test]
    fn duplicate_path_rejected() {
        let mut t = sample_tree();
        assert!(t.insert("a.bias", NdArray::zeros(&[2])).is_err());
    }

    #[test]
    fn structure_check_names_first_divergent_path() {
        let a = sample_tree();
        let mut b = sample_tree();
        b.set("b.weight", NdArray::zeros(&[2, 3])).unwrap();
        a.check_same_structure(&b).unwrap();
        let mut c = ParamTree::new();
        c.insert("a.bias", NdArray::zeros(&[3])).unwrap();
        c.insert("b.weight", NdArray::zeros(&[2, 3])).unwrap();
        match a.check_same_structure(&c) {
            Err(Error::Structure { path, .. }) => assert_eq!(path, "a.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(ParamTree::from_bytes(b"nope").is_err());
        let mut bytes = sample_tree().to_bytes();
        bytes.pop();
        assert!(ParamTree::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let t = sample_tree();
        t.save(&p).unwrap();
        assert_eq!(ParamTree::load(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            leaves in proptest::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}",
                (1usize..4, 1usize..5).prop_flat_map(|(r, c)|
                    (Just(vec![r, c]), proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), r * c))),
                1..6)
        ) {
            let mut t = ParamTree::new();
            for (k, (shape, data)) in &leaves {
                let data: Vec<Real> = data.iter().map(|&v| v as Real).collect();
                t.insert(k.clone(), NdArray::new(shape.clone(), data).unwrap()).unwrap();
            }
            let bytes = t.to_bytes();
            let back = ParamTree::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for ((_, a), (_, b)) in t.iter().zip(back.iter()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}

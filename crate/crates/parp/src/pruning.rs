//! Binary pruning masks: global magnitude pruning, random pruning, mask
//! application (zero-out vs freeze), and the bit-exact mask file format.
//!
//! Masks cover exactly the prunable parameters of the store they were
//! built from and carry that store's layout hash, so applying a mask to a
//! differently-shaped store is a typed error rather than silent corruption.

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::rng;
use crate::tensor::ParamStore;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

const MASK_MAGIC: &[u8; 8] = b"PARPMASK";
const MASK_VERSION: u16 = 1;

/// Per-prunable-param bit arrays. A set bit keeps the weight, a cleared
/// bit prunes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    entries: Vec<(String, Vec<bool>)>,
    layout_hash: [u8; 32],
    declared_sparsity: f64,
}

fn hex(h: &[u8]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

impl Mask {
    /// All-ones mask over the store's prunable params.
    pub fn ones(store: &ParamStore) -> Mask {
        Mask {
            entries: store
                .prunable()
                .map(|p| (p.name.clone(), vec![true; p.value.len()]))
                .collect(),
            layout_hash: store.layout_hash(),
            declared_sparsity: 0.0,
        }
    }

    pub fn layout_hash(&self) -> &[u8; 32] {
        &self.layout_hash
    }

    pub fn declared_sparsity(&self) -> f64 {
        self.declared_sparsity
    }

    pub fn entries(&self) -> &[(String, Vec<bool>)] {
        &self.entries
    }

    /// Mutable bit access for in-crate mask construction. Callers may flip
    /// bits but must not change names, lengths, or order.
    #[cfg(test)]
    pub(crate) fn entries_mut(&mut self) -> &mut [(String, Vec<bool>)] {
        &mut self.entries
    }

    pub fn bits(&self, name: &str) -> Option<&[bool]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    /// Total prunable element count covered by this mask.
    pub fn len(&self) -> usize {
        self.entries.iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of cleared (pruned) bits.
    pub fn sparsity(&self) -> f64 {
        let d = self.len();
        if d == 0 {
            return 0.0;
        }
        let zeros: usize =
            self.entries.iter().map(|(_, b)| b.iter().filter(|&&x| !x).count()).sum();
        zeros as f64 / d as f64
    }

    pub fn check_binding(&self, store: &ParamStore) -> Result<()> {
        let actual = store.layout_hash();
        if actual != self.layout_hash {
            return Err(Error::MaskBinding {
                expected: hex(&self.layout_hash[..8]),
                actual: hex(&actual[..8]),
            });
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &Mask) -> Result<()> {
        if self.layout_hash != other.layout_hash {
            return Err(Error::MaskBinding {
                expected: hex(&self.layout_hash[..8]),
                actual: hex(&other.layout_hash[..8]),
            });
        }
        Ok(())
    }

    /// Zero out masked weight elements in place. Gradients are NOT blocked;
    /// pruned weights may regrow under subsequent updates.
    pub fn apply_zero(&self, store: &mut ParamStore) -> Result<()> {
        self.check_binding(store)?;
        for (name, bits) in &self.entries {
            let p = store.get_mut(name).expect("layout hash guarantees presence");
            for (v, &keep) in p.value.data_mut().iter_mut().zip(bits) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Freeze hook body: pin masked weights to exactly zero by clearing the
    /// weight, its gradient, and its optimizer moments. Run after every
    /// optimizer step for subnetwork finetuning.
    pub fn enforce(&self, store: &mut ParamStore, adam: Option<&mut AdamState>) -> Result<()> {
        self.check_binding(store)?;
        // store index of each masked param, for moment lookup
        let indices: Vec<usize> = {
            let pos: std::collections::HashMap<&str, usize> =
                store.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
            self.entries.iter().map(|(n, _)| pos[n.as_str()]).collect()
        };
        let mut adam = adam;
        for ((name, bits), &idx) in self.entries.iter().zip(&indices) {
            let p = store.get_mut(name).unwrap();
            for (i, &keep) in bits.iter().enumerate() {
                if !keep {
                    p.value.data_mut()[i] = 0.0;
                    p.grad.data_mut()[i] = 0.0;
                }
            }
            if let Some(state) = adam.as_deref_mut() {
                let (m, v) = state.moments_mut(idx);
                for (i, &keep) in bits.iter().enumerate() {
                    if !keep {
                        m.data_mut()[i] = 0.0;
                        v.data_mut()[i] = 0.0;
                    }
                }
            }
        }
        Ok(())
    }

    /// kept(self) ⊆ kept(other), elementwise.
    pub fn is_nested_in(&self, other: &Mask) -> Result<bool> {
        self.same_layout(other)?;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            if a.iter().zip(b).any(|(&x, &y)| x && !y) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MASK_MAGIC);
        buf.extend_from_slice(&MASK_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.layout_hash);
        buf.extend_from_slice(&self.declared_sparsity.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, bits) in &self.entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(bits.len() as u64).to_le_bytes());
            // bit-packed, LSB-first, zero-padded to a byte boundary
            let mut byte = 0u8;
            for (i, &b) in bits.iter().enumerate() {
                if b {
                    byte |= 1 << (i % 8);
                }
                if i % 8 == 7 {
                    buf.push(byte);
                    byte = 0;
                }
            }
            if bits.len() % 8 != 0 {
                buf.push(byte);
            }
        }
        let tmp = path.with_extension("mask.tmp");
        std::fs::File::create(&tmp)?.write_all(&buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > buf.len() {
                return Err(Error::MaskFormat("truncated file".to_string()));
            }
            let s = &buf[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, 8)? != MASK_MAGIC {
            return Err(Error::MaskFormat("bad magic".to_string()));
        }
        let version = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap());
        if version != MASK_VERSION {
            return Err(Error::MaskFormat(format!("unsupported version {version}")));
        }
        let mut layout_hash = [0u8; 32];
        layout_hash.copy_from_slice(take(&mut cur, 32)?);
        let declared_sparsity = f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
                .map_err(|e| Error::MaskFormat(format!("bad name: {e}")))?;
            let bit_count = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
            let byte_count = bit_count.div_ceil(8);
            let packed = take(&mut cur, byte_count)?;
            let bits = (0..bit_count).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            entries.push((name, bits));
        }
        if cur != buf.len() {
            return Err(Error::MaskFormat("trailing bytes".to_string()));
        }
        Ok(Mask { entries, layout_hash, declared_sparsity })
    }
}

/// Sparsity targets per re-prune event, non-decreasing, ending at the
/// final target. Event indices are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    pub events: Vec<(usize, f64)>,
}

impl SparsitySchedule {
    /// Same sparsity at every event (plain re-pruning).
    pub fn constant(s: f64, n_events: usize) -> Self {
        SparsitySchedule { events: (1..=n_events).map(|k| (k, s)).collect() }
    }

    /// Linear ramp from `s0` (exclusive) to `s` (inclusive) over `n_events`.
    pub fn linear(s0: f64, s: f64, n_events: usize) -> Self {
        let n = n_events.max(1);
        SparsitySchedule {
            events: (1..=n)
                .map(|k| (k, s0 + (s - s0) * k as f64 / n as f64))
                .collect(),
        }
    }

    /// Geometric ramp of the keep rate from `1-s0` down to `1-s`.
    pub fn geometric(s0: f64, s: f64, n_events: usize) -> Self {
        let n = n_events.max(1);
        let (k0, k1) = (1.0 - s0, 1.0 - s);
        SparsitySchedule {
            events: (1..=n)
                .map(|k| {
                    let keep = k0 * (k1 / k0).powf(k as f64 / n as f64);
                    (k, 1.0 - keep)
                })
                .collect(),
        }
    }

    pub fn at_event(&self, k: usize) -> f64 {
        self.events[k - 1].1
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn final_sparsity(&self) -> f64 {
        self.events.last().map(|&(_, s)| s).unwrap_or(0.0)
    }
}

/// Half-away-from-zero rounding for the pruned count.
fn pruned_count(s: f64, d: usize) -> usize {
    (s * d as f64).round() as usize
}

/// Build a mask from an explicit set of cleared flat indices over the
/// concatenated prunable params (store order).
fn mask_from_cleared(store: &ParamStore, cleared: &[usize], s: f64) -> Mask {
    let mut mask = Mask::ones(store);
    mask.declared_sparsity = s;
    let mut offsets = Vec::new();
    let mut acc = 0usize;
    for (_, bits) in &mask.entries {
        offsets.push(acc);
        acc += bits.len();
    }
    for &flat in cleared {
        let e = offsets.partition_point(|&o| o <= flat) - 1;
        mask.entries[e].1[flat - offsets[e]] = false;
    }
    mask
}

/// Unstructured global magnitude pruning: clear exactly `round(s*d)` bits
/// chosen as the smallest |weight| over the union of all prunable params.
/// Ties break by ascending (param order, flat index).
pub fn global_magnitude_mask(store: &ParamStore, s: f64) -> Mask {
    let d = store.prunable_len();
    let k = pruned_count(s, d);
    let mut mags: Vec<(f64, usize)> = Vec::with_capacity(d);
    let mut flat = 0usize;
    for p in store.prunable() {
        for v in p.value.data() {
            mags.push((v.abs(), flat));
            flat += 1;
        }
    }
    // (magnitude, flat index) is a total order; flat index encodes the
    // (param order, index) tie-break.
    mags.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let cleared: Vec<usize> = mags[..k].iter().map(|&(_, i)| i).collect();
    mask_from_cleared(store, &cleared, s)
}

/// Random pruning: clear exactly `round(s*d)` bits uniformly without
/// replacement, deterministic in the seed.
pub fn random_mask(store: &ParamStore, s: f64, seed: u64) -> Mask {
    let d = store.prunable_len();
    let k = pruned_count(s, d);
    let mut idx: Vec<usize> = (0..d).collect();
    let mut r = rng::stream(seed, "random-mask");
    // partial Fisher-Yates: first k entries are the cleared sample
    for i in 0..k.min(d) {
        let j = i + r.gen_range(0..d - i);
        idx.swap(i, j);
    }
    mask_from_cleared(store, &idx[..k], s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Param, Tensor};

    fn toy_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(Param::new("w", Tensor::new(vec![2], vec![0.1, -0.5]).unwrap(), true)).unwrap();
        s.insert(Param::new("v", Tensor::new(vec![2], vec![0.3, 0.05]).unwrap(), true)).unwrap();
        s.insert(Param::new("ln", Tensor::filled(vec![2], 1.0), false)).unwrap();
        s
    }

    #[test]
    fn magnitude_mask_extremes() {
        let s = toy_store();
        assert_eq!(global_magnitude_mask(&s, 0.0).sparsity(), 0.0);
        assert_eq!(global_magnitude_mask(&s, 1.0).sparsity(), 1.0);
    }

    #[test]
    fn magnitude_mask_picks_smallest() {
        // magnitudes: w=[0.1, 0.5], v=[0.3, 0.05]; s=0.5 clears 0.05, 0.1
        let s = toy_store();
        let m = global_magnitude_mask(&s, 0.5);
        assert_eq!(m.bits("w").unwrap(), &[false, true]);
        assert_eq!(m.bits("v").unwrap(), &[true, false]);
    }

    #[test]
    fn magnitude_masks_are_nested() {
        let store = {
            let mut s = ParamStore::new();
            let mut t = Tensor::zeros(vec![100]);
            let mut r = rng::stream(5, "nested");
            rng::fill_normal(&mut r, t.data_mut(), 1.0);
            s.insert(Param::new("w", t, true)).unwrap();
            s
        };
        let mut prev = global_magnitude_mask(&store, 0.1);
        for i in 2..=9 {
            let cur = global_magnitude_mask(&store, i as f64 / 10.0);
            assert!(cur.is_nested_in(&prev).unwrap());
            prev = cur;
        }
    }

    #[test]
    fn random_mask_is_deterministic_and_exact() {
        let s = toy_store();
        let a = random_mask(&s, 0.5, 11);
        let b = random_mask(&s, 0.5, 11);
        assert_eq!(a, b);
        assert_eq!(a.sparsity(), 0.5);
        assert_eq!(random_mask(&s, 0.0, 3).sparsity(), 0.0);
    }

    #[test]
    fn apply_zero_elementwise() {
        let mut s = toy_store();
        let mut m = Mask::ones(&s);
        m.entries[0].1[0] = false; // clear w[0]
        m.apply_zero(&mut s).unwrap();
        assert_eq!(s.value("w").data(), &[0.0, -0.5]);
        assert_eq!(s.value("v").data(), &[0.3, 0.05]);
        assert_eq!(s.value("ln").data(), &[1.0, 1.0]);
    }

    #[test]
    fn all_zero_mask_spares_non_prunable() {
        let mut s = toy_store();
        global_magnitude_mask(&s, 1.0).apply_zero(&mut s).unwrap();
        assert!(s.value("w").data().iter().all(|&v| v == 0.0));
        assert!(s.value("v").data().iter().all(|&v| v == 0.0));
        assert_eq!(s.value("ln").data(), &[1.0, 1.0]);
    }

    #[test]
    fn binding_error_on_layout_mismatch() {
        let s = toy_store();
        let m = global_magnitude_mask(&s, 0.5);
        let mut other = ParamStore::new();
        other.insert(Param::new("w", Tensor::zeros(vec![3]), true)).unwrap();
        assert!(matches!(m.apply_zero(&mut other), Err(Error::MaskBinding { .. })));
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mask");
        let store = {
            let mut s = ParamStore::new();
            let mut t = Tensor::zeros(vec![37]); // not a byte multiple
            let mut r = rng::stream(1, "roundtrip");
            rng::fill_normal(&mut r, t.data_mut(), 1.0);
            s.insert(Param::new("w", t, true)).unwrap();
            s
        };
        let m = random_mask(&store, 0.4, 7);
        m.save(&path).unwrap();
        assert_eq!(Mask::load(&path).unwrap(), m);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mask");
        let s = toy_store();
        global_magnitude_mask(&s, 0.5).save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Mask::load(&path), Err(Error::MaskFormat(_))));
    }

    #[test]
    fn exchange_property_on_random_instance() {
        // no cleared bit has strictly larger magnitude than any kept bit
        let mut s = ParamStore::new();
        let mut t = Tensor::zeros(vec![500]);
        let mut r = rng::stream(2, "exchange");
        rng::fill_normal(&mut r, t.data_mut(), 1.0);
        s.insert(Param::new("w", t, true)).unwrap();
        let m = global_magnitude_mask(&s, 0.3);
        let bits = m.bits("w").unwrap();
        let vals = s.value("w").data();
        let max_cleared = bits
            .iter()
            .zip(vals)
            .filter(|(&b, _)| !b)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max);
        let min_kept = bits
            .iter()
            .zip(vals)
            .filter(|(&b, _)| b)
            .map(|(_, v)| v.abs())
            .fold(f64::INFINITY, f64::min);
        assert!(max_cleared <= min_kept);
    }
}

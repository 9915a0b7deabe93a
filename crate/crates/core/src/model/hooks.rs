//! Capture and injection of per-block hidden states.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use cost_tensor::Tensor;

use crate::error::{Error, Result};

/// A block output `(B, N, D)` recorded at one `(step, layer)` slot.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub step: usize,
    pub layer: usize,
    pub tokens: Tensor<f32>,
    pub grid: [usize; 3],
}

impl HiddenState {
    /// Re-spatialized view `(B, f, h, w, D)`.
    pub fn spatial(&self) -> Result<Tensor<f32>> {
        let shape = self.tokens.shape();
        let n: usize = self.grid.iter().product();
        if shape.len() != 3 || shape[1] != n {
            return Err(Error::Shape(format!(
                "hidden state {:?} does not match grid {:?}",
                shape, self.grid
            )));
        }
        let [f, h, w] = self.grid;
        Ok(self.tokens.clone().reshape([shape[0], f, h, w, shape[2]])?)
    }
}

/// What happens to a block's output at an injection slot.
#[derive(Clone)]
pub enum Injection {
    /// Overwrite with this tensor (shape must match).
    Replace(Tensor<f32>),
    /// Overwrite only the listed token rows of every instance with the
    /// corresponding rows of this `(B, N, D)` tensor.
    ReplaceTokens(Tensor<f32>, Vec<usize>),
    /// Replace with the elementwise mean across a group of lock-stepped runs.
    GroupMean { group: Arc<MeanGroup>, member: usize },
}

impl std::fmt::Debug for Injection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Injection::Replace(t) => write!(f, "Replace({:?})", t.shape()),
            Injection::ReplaceTokens(t, rows) => write!(f, "ReplaceTokens({:?}, {} rows)", t.shape(), rows.len()),
            Injection::GroupMean { member, group } => {
                write!(f, "GroupMean(member {member} of {})", group.size())
            }
        }
    }
}

/// Capture requests, injection rules, and captured states for one run.
#[derive(Debug, Default, Clone)]
pub struct HookRegistry {
    captures: BTreeSet<(usize, usize)>,
    injections: BTreeMap<(usize, usize), Injection>,
    records: BTreeMap<(usize, usize), HiddenState>,
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Requests capture at every `(step, layer)` pair of the product.
    pub fn register_capture(&mut self, steps: &[usize], layers: &[usize]) -> Result<&mut Self> {
        for &s in steps {
            for &l in layers {
                if !self.captures.insert((s, l)) {
                    return Err(Error::Hook(format!("capture at step {s}, layer {l} registered twice")));
                }
            }
        }
        Ok(self)
    }

    pub fn inject(&mut self, step: usize, layer: usize, rule: Injection) -> Result<&mut Self> {
        if self.injections.contains_key(&(step, layer)) {
            return Err(Error::Hook(format!("conflicting injection at step {step}, layer {layer}")));
        }
        self.injections.insert((step, layer), rule);
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.captures.is_empty() && self.injections.is_empty()
    }

    /// Largest layer index referenced by any slot.
    pub fn max_layer(&self) -> Option<usize> {
        self.captures
            .iter()
            .chain(self.injections.keys())
            .map(|&(_, l)| l)
            .max()
    }

    pub(crate) fn wants_step(&self, step: usize) -> bool {
        self.captures.range((step, 0)..=(step, usize::MAX)).next().is_some()
            || self.injections.range((step, 0)..=(step, usize::MAX)).next().is_some()
    }

    /// Applies any injection at this slot, then records it if requested.
    /// Captures therefore observe exactly what the next block consumes.
    pub(crate) fn after_block(
        &mut self,
        step: usize,
        layer: usize,
        tokens: &mut Tensor<f32>,
        batch: usize,
        grid: [usize; 3],
    ) -> Result<()> {
        let n: usize = grid.iter().product();
        if let Some(rule) = self.injections.get(&(step, layer)) {
            let flat_shape = tokens.shape().to_vec();
            let replacement = match rule {
                Injection::Replace(t) => t.clone(),
                Injection::ReplaceTokens(src, rows) => {
                    let d = flat_shape[1];
                    if src.shape() != [batch, n, d] {
                        return Err(Error::Shape(format!(
                            "token source {:?} does not match hidden state {:?} at step {step}, layer {layer}",
                            src.shape(),
                            [batch, n, d]
                        )));
                    }
                    let mut out = tokens.clone();
                    for b in 0..batch {
                        for &r in rows {
                            if r >= n {
                                return Err(Error::Hook(format!("token {r} outside {n} tokens")));
                            }
                            let at = (b * n + r) * d;
                            out.data_mut()[at..at + d].copy_from_slice(&src.data()[at..at + d]);
                        }
                    }
                    out
                }
                Injection::GroupMean { group, member } => {
                    let shaped = tokens.clone().reshape([batch, n, flat_shape[1]])?;
                    group.exchange(*member, shaped)?
                }
            };
            if replacement.numel() != tokens.numel() || replacement.shape().last() != flat_shape.last() {
                return Err(Error::Shape(format!(
                    "injected tensor {:?} does not match hidden state {:?} at step {step}, layer {layer}",
                    replacement.shape(),
                    [batch, n, flat_shape[1]]
                )));
            }
            *tokens = replacement.reshape(flat_shape)?;
        }
        if self.captures.contains(&(step, layer)) {
            let d = tokens.shape()[1];
            self.records.insert(
                (step, layer),
                HiddenState {
                    step,
                    layer,
                    tokens: tokens.clone().reshape([batch, n, d])?,
                    grid,
                },
            );
        }
        Ok(())
    }

    /// Removes and returns a captured state; each slot yields at most once.
    pub fn take(&mut self, step: usize, layer: usize) -> Option<HiddenState> {
        self.records.remove(&(step, layer))
    }

    /// Removes and returns every captured state in `(step, layer)` order.
    pub fn drain(&mut self) -> Vec<HiddenState> {
        std::mem::take(&mut self.records).into_values().collect()
    }

    pub fn captured_len(&self) -> usize {
        self.records.len()
    }
}

struct GroupState {
    aborted: bool,
    generation: u64,
    slots: Vec<Option<Tensor<f32>>>,
    arrived: usize,
    result: Option<std::result::Result<Tensor<f32>, String>>,
}

/// Barrier at which `size` runs deposit a tensor and all receive the
/// elementwise mean, summed in member order in f64 so the result does not
/// depend on arrival order.
pub struct MeanGroup {
    size: usize,
    timeout: Duration,
    state: Mutex<GroupState>,
    cv: Condvar,
}

impl MeanGroup {
    pub fn new(size: usize, timeout: Duration) -> Arc<Self> {
        Arc::new(Self {
            size,
            timeout,
            state: Mutex::new(GroupState {
                aborted: false,
                generation: 0,
                slots: vec![None; size],
                arrived: 0,
                result: None,
            }),
            cv: Condvar::new(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Wakes every waiting member with an error; used when one run fails so
    /// the others do not wait out the timeout.
    pub fn abort(&self) {
        let mut st = self.state.lock().expect("group lock");
        st.aborted = true;
        self.cv.notify_all();
    }

    pub fn exchange(&self, member: usize, tensor: Tensor<f32>) -> Result<Tensor<f32>> {
        if member >= self.size {
            return Err(Error::Hook(format!("member {member} outside group of {}", self.size)));
        }
        let mut st = self.state.lock().expect("group lock");
        if st.aborted {
            return Err(Error::Hook("ensemble group aborted".into()));
        }
        if st.slots[member].is_some() {
            return Err(Error::Hook(format!("member {member} arrived twice at one barrier")));
        }
        st.slots[member] = Some(tensor);
        st.arrived += 1;
        let my_gen = st.generation;
        if st.arrived == self.size {
            let slots: Vec<Tensor<f32>> = st.slots.iter_mut().map(|s| s.take().expect("slot")).collect();
            st.result = Some(mean_in_order(&slots));
            st.arrived = 0;
            st.generation += 1;
            self.cv.notify_all();
        } else {
            let (guard, timeout) = self
                .cv
                .wait_timeout_while(st, self.timeout, |s| s.generation == my_gen && !s.aborted)
                .expect("group lock");
            st = guard;
            if st.generation == my_gen && st.aborted {
                return Err(Error::Hook("ensemble group aborted".into()));
            }
            if timeout.timed_out() {
                return Err(Error::BarrierTimeout(self.timeout));
            }
        }
        match st.result.as_ref().expect("result published") {
            Ok(t) => Ok(t.clone()),
            Err(e) => Err(Error::Shape(e.clone())),
        }
    }
}

/// Elementwise mean accumulated in f64 in slice order.
pub fn mean_in_order(tensors: &[Tensor<f32>]) -> std::result::Result<Tensor<f32>, String> {
    let first = tensors.first().ok_or("empty group")?;
    if let Some(t) = tensors.iter().find(|t| t.shape() != first.shape()) {
        return Err(format!(
            "ensemble members diverge in shape: {:?} vs {:?}",
            first.shape(),
            t.shape()
        ));
    }
    let k = tensors.len() as f64;
    let mut acc = vec![0.0f64; first.numel()];
    for t in tensors {
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += v as f64;
        }
    }
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| (v / k) as f32).collect())
        .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cost_tensor::Rng;

    #[test]
    fn duplicate_capture_and_conflicting_injection_fail() {
        let mut h = HookRegistry::new();
        h.register_capture(&[0], &[1, 2]).unwrap();
        assert!(h.register_capture(&[0], &[2]).is_err());
        let t = Tensor::zeros([1, 2, 3]).unwrap();
        h.inject(0, 1, Injection::Replace(t.clone())).unwrap();
        assert!(h.inject(0, 1, Injection::Replace(t)).is_err());
        assert_eq!(h.max_layer(), Some(2));
    }

    #[test]
    fn mean_of_identical_tensors_is_exact() {
        let x: Tensor<f32> = Rng::new(3).gaussian([64]).unwrap();
        let m = mean_in_order(&[x.clone(), x.clone(), x.clone()]).unwrap();
        assert_eq!(m, x);
        assert_eq!(mean_in_order(std::slice::from_ref(&x)).unwrap(), x);
    }

    #[test]
    fn group_exchange_across_threads() {
        let g = MeanGroup::new(3, Duration::from_secs(5));
        let outs: Vec<Tensor<f32>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..3)
                .map(|k| {
                    let g = g.clone();
                    s.spawn(move || {
                        let t = Tensor::full([2], k as f32).unwrap();
                        g.exchange(k, t).unwrap()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for o in outs {
            assert_eq!(o.data(), &[1.0, 1.0]);
        }
    }

    #[test]
    fn lone_member_times_out() {
        let g = MeanGroup::new(2, Duration::from_millis(20));
        let err = g.exchange(0, Tensor::zeros([1]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::BarrierTimeout(_)));
    }

    #[test]
    fn abort_wakes_waiters() {
        let g = MeanGroup::new(2, Duration::from_secs(30));
        let err = std::thread::scope(|s| {
            let h = s.spawn(|| g.exchange(0, Tensor::zeros([1]).unwrap()));
            std::thread::sleep(Duration::from_millis(20));
            g.abort();
            h.join().unwrap()
        });
        assert!(matches!(err, Err(Error::Hook(_))));
    }

    #[test]
    fn replace_tokens_touches_only_listed_rows() {
        let mut h = HookRegistry::new();
        let src = Tensor::full([1, 3, 2], 9.0f32).unwrap();
        h.inject(0, 0, Injection::ReplaceTokens(src, vec![1])).unwrap();
        h.register_capture(&[0], &[0]).unwrap();
        let mut t = Tensor::zeros([3, 2]).unwrap();
        h.after_block(0, 0, &mut t, 1, [3, 1, 1]).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 9.0, 9.0, 0.0, 0.0]);
        assert_eq!(h.take(0, 0).unwrap().tokens.data(), t.data());
        assert!(h.take(0, 0).is_none());
    }

    #[test]
    fn shape_divergence_is_reported() {
        let r = mean_in_order(&[Tensor::zeros([2]).unwrap(), Tensor::zeros([3]).unwrap()]);
        assert!(r.is_err());
    }
}

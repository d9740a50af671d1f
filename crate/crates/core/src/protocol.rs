//! End-to-end three-state protocol: emission, channel, detection and sifting.
//!
//! Two modes produce the same [`TallySet`] layout. [`run_monte_carlo`] samples
//! every pulse; [`run_analytic`] sums exact outcome probabilities over every
//! (state, previous state, intensity, previous intensity) combination.
//!
//! Monte Carlo work is cut into fixed shards of [`SHARD_PULSES`] pulses. Shard
//! `i` draws from ChaCha8 stream `i` of the run seed and starts from a fresh
//! predecessor draw, so results do not depend on how many threads run them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::PureState;
use crate::channel::{resolve_click, LinkModel, PulseKernel};
use crate::error::{QkdError, Result};
use crate::labels::{Basis, Detector, Intensity, StateLabel};
use crate::source::{LabelSampler, SourceProfile};
use crate::tally::{TallyKind, TallySet};

pub const SHARD_PULSES: u64 = 1 << 20;

/// Sifted bits per privacy-amplification block: 4192 LDPC blocks of 1944 bits.
pub const PA_BLOCK_BITS: u64 = 4192 * 1944;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulationMode {
    #[serde(alias = "monte_carlo")]
    Mc,
    Analytic,
}

/// Kernels for every (state, predecessor state, intensity, predecessor
/// intensity); predecessor slot 3 / 2 means "no predecessor".
struct KernelTable {
    kernels: Vec<PulseKernel>,
}

impl KernelTable {
    fn new(profile: &SourceProfile, model: &LinkModel) -> Self {
        let mut kernels = Vec::with_capacity(72);
        for j in StateLabel::ALL {
            for k in prev_states() {
                for a in Intensity::ALL {
                    for b in prev_intensities() {
                        let state = PureState::from_theta(profile.theta_actual(j, k));
                        kernels.push(PulseKernel::new(&state, profile.mu_actual(a, b), model));
                    }
                }
            }
        }
        KernelTable { kernels }
    }

    #[inline]
    fn get(
        &self,
        j: StateLabel,
        k: Option<StateLabel>,
        a: Intensity,
        b: Option<Intensity>,
    ) -> &PulseKernel {
        let ki = k.map_or(3, StateLabel::index);
        let bi = b.map_or(2, Intensity::index);
        &self.kernels[((j.index() * 4 + ki) * 2 + a.index()) * 3 + bi]
    }
}

fn prev_states() -> [Option<StateLabel>; 4] {
    [
        Some(StateLabel::Zero),
        Some(StateLabel::One),
        Some(StateLabel::Plus),
        None,
    ]
}

fn prev_intensities() -> [Option<Intensity>; 3] {
    [Some(Intensity::Signal), Some(Intensity::Decoy), None]
}

/// Per-pulse simulation state of one timeline.
struct Timeline<'a> {
    kernels: &'a KernelTable,
    sampler: LabelSampler,
    dead_slots: u64,
    slot: u64,
    blocked_until: [u64; 4],
    prev: Option<(StateLabel, Intensity)>,
}

impl<'a> Timeline<'a> {
    fn new(kernels: &'a KernelTable, profile: &SourceProfile, model: &LinkModel) -> Self {
        Timeline {
            kernels,
            sampler: LabelSampler::new(profile),
            dead_slots: model.dead_slots(),
            slot: 0,
            blocked_until: [0; 4],
            prev: None,
        }
    }

    /// Starts a shard mid-stream: the predecessor is drawn from the label
    /// distribution.
    fn draw_predecessor<R: Rng>(&mut self, rng: &mut R) {
        let j = self.sampler.state(rng);
        let a = self.sampler.intensity(rng);
        self.prev = Some((j, a));
    }

    /// Simulates one pulse; returns the detector that registered, if any.
    #[inline]
    fn step<R: Rng>(
        &mut self,
        rng: &mut R,
        tally: &mut TallySet,
    ) -> Option<(StateLabel, Detector)> {
        let j = self.sampler.state(rng);
        let a = self.sampler.intensity(rng);
        let coherent = self.sampler.coherent(rng);
        tally.elapsed_pulses += 1.0;
        tally.sent[j][a] += 1.0;
        if coherent && self.prev.is_some() {
            tally.coherent_pulses += 1.0;
        }
        let kernel = self
            .kernels
            .get(j, self.prev.map(|p| p.0), a, self.prev.map(|p| p.1));
        self.prev = Some((j, a));
        let slot = self.slot;
        self.slot += 1;

        let (mut mask, photons) = kernel.sample(rng);
        if mask == 0 {
            return None;
        }
        if self.dead_slots > 0 {
            // Paralyzable: anything reaching a blind detector restarts its dead time.
            for d in 0..4 {
                if mask & (1 << d) != 0 {
                    if slot < self.blocked_until[d] {
                        mask &= !(1 << d);
                    }
                    self.blocked_until[d] = slot + self.dead_slots + 1;
                }
            }
            if mask == 0 {
                return None;
            }
        }
        let pattern = [0, 1, 2, 3].map(|d| mask & (1 << d) != 0);
        let d = resolve_click(pattern, rng)?;
        tally.cells.record(j, a, d, 1.0);
        if photons == 1 {
            if let Some(t) = tally.single_photon.as_mut() {
                t.record(j, a, d, 1.0);
            }
        } else if photons == 0 {
            if let Some(t) = tally.vacuum.as_mut() {
                t.record(j, a, d, 1.0);
            }
        }
        Some((j, d))
    }
}

fn check_inputs(profile: &SourceProfile, model: &LinkModel, n_pulses: u64) -> Result<()> {
    if n_pulses == 0 {
        return Err(QkdError::InvalidParameter(
            "pulse count must be at least 1".into(),
        ));
    }
    profile.validate()?;
    model.validate()
}

fn shard_rng(seed: u64, shard: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard);
    rng
}

/// Pulse-by-pulse Monte Carlo with photon-number truth tagging.
///
/// Runs shards on the current rayon pool; the result depends only on
/// `(profile, model, n_pulses, seed)`.
pub fn run_monte_carlo(
    profile: &SourceProfile,
    model: &LinkModel,
    n_pulses: u64,
    seed: u64,
) -> Result<TallySet> {
    check_inputs(profile, model, n_pulses)?;
    let kernels = KernelTable::new(profile, model);
    let shards = n_pulses.div_ceil(SHARD_PULSES);
    let parts: Vec<TallySet> = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let start = shard * SHARD_PULSES;
            let len = SHARD_PULSES.min(n_pulses - start);
            let mut rng = shard_rng(seed, shard);
            let mut tl = Timeline::new(&kernels, profile, model);
            if shard > 0 {
                tl.draw_predecessor(&mut rng);
            }
            let mut tally = TallySet::empty(TallyKind::Sampled, true);
            for _ in 0..len {
                tl.step(&mut rng, &mut tally);
            }
            tally
        })
        .collect();
    let mut total = TallySet::empty(TallyKind::Sampled, true);
    for p in &parts {
        total += p;
    }
    Ok(total)
}

/// Expected tallies for `n_pulses`, without sampling. Dead time is not
/// modelled in this mode.
pub fn run_analytic(profile: &SourceProfile, model: &LinkModel, n_pulses: u64) -> Result<TallySet> {
    check_inputs(profile, model, n_pulses)?;
    Ok(expected_tallies(profile, model, n_pulses as f64))
}

/// Real-valued variant of [`run_analytic`] (no validation; callers ensure
/// validity). Used by the optimizer for non-integer pulse budgets.
pub fn expected_tallies(profile: &SourceProfile, model: &LinkModel, n_pulses: f64) -> TallySet {
    let mut t = TallySet::empty(TallyKind::Expected, true);
    t.elapsed_pulses = n_pulses;
    t.coherent_pulses = (n_pulses - 1.0).max(0.0) * profile.phase_coherence;
    for j in StateLabel::ALL {
        for a in Intensity::ALL {
            t.sent[j][a] = n_pulses * profile.p_state[j] * profile.p_intensity[a];
        }
    }
    for (j, k, a, b, w) in combos(profile) {
        if w == 0.0 {
            continue;
        }
        let state = PureState::from_theta(profile.theta_actual(j, Some(k)));
        let kernel = PulseKernel::new(&state, profile.mu_actual(a, Some(b)), model);
        let o = kernel.outcome_probabilities();
        let scale = n_pulses * w;
        for d in Detector::ALL {
            let i = d.index();
            t.cells.record(j, a, d, scale * o.total[i]);
            if let Some(s) = t.single_photon.as_mut() {
                s.record(j, a, d, scale * o.single[i]);
            }
            if let Some(v) = t.vacuum.as_mut() {
                v.record(j, a, d, scale * o.vacuum[i]);
            }
        }
    }
    t
}

/// Every (state, previous state, intensity, previous intensity) with its
/// stationary probability.
fn combos(
    profile: &SourceProfile,
) -> impl Iterator<Item = (StateLabel, StateLabel, Intensity, Intensity, f64)> + '_ {
    StateLabel::ALL.into_iter().flat_map(move |j| {
        StateLabel::ALL.into_iter().flat_map(move |k| {
            Intensity::ALL.into_iter().flat_map(move |a| {
                Intensity::ALL.into_iter().map(move |b| {
                    let w = profile.p_state[j]
                        * profile.p_state[k]
                        * profile.p_intensity[a]
                        * profile.p_intensity[b];
                    (j, k, a, b, w)
                })
            })
        })
    })
}

/// Runs one continuous timeline and cuts a tally each time the sifted Z–Z
/// count reaches `block_bits`. Stops after `n_blocks` blocks or `max_pulses`.
pub fn run_blocks(
    profile: &SourceProfile,
    model: &LinkModel,
    block_bits: u64,
    n_blocks: usize,
    max_pulses: u64,
    seed: u64,
) -> Result<Vec<TallySet>> {
    check_inputs(profile, model, max_pulses)?;
    if block_bits == 0 {
        return Err(QkdError::InvalidParameter(
            "block size must be at least 1 bit".into(),
        ));
    }
    let kernels = KernelTable::new(profile, model);
    let mut rng = shard_rng(seed, 0);
    let mut tl = Timeline::new(&kernels, profile, model);
    let mut blocks = Vec::new();
    let mut cur = TallySet::empty(TallyKind::Sampled, true);
    let mut sifted = 0u64;
    for _ in 0..max_pulses {
        if let Some((j, d)) = tl.step(&mut rng, &mut cur) {
            if j.basis() == Basis::Z && d.basis() == Basis::Z {
                sifted += 1;
                if sifted == block_bits {
                    blocks.push(std::mem::replace(
                        &mut cur,
                        TallySet::empty(TallyKind::Sampled, true),
                    ));
                    sifted = 0;
                    if blocks.len() == n_blocks {
                        break;
                    }
                }
            }
        }
    }
    Ok(blocks)
}

/// Draws a block's tallies directly from the per-pulse outcome distribution:
/// multinomial over (state, predecessor, intensity, predecessor intensity)
/// combinations, then over (photon class × detector) outcomes. Statistically
/// equivalent to [`run_monte_carlo`] without dead time, but costs O(1) per block,
/// which makes thousands of repeated finite-size experiments cheap. Pair counts
/// are drawn independently, ignoring the overlap between consecutive pairs.
pub fn sample_block<R: Rng>(
    profile: &SourceProfile,
    model: &LinkModel,
    n_pulses: u64,
    rng: &mut R,
) -> Result<TallySet> {
    check_inputs(profile, model, n_pulses)?;
    let table = BlockSampler::new(profile, model);
    Ok(table.sample(n_pulses, rng))
}

/// Reusable form of [`sample_block`] for repeated draws.
pub struct BlockSampler {
    combos: Vec<(StateLabel, Intensity, f64, [f64; 13])>,
    p_coherent: f64,
}

impl BlockSampler {
    pub fn new(profile: &SourceProfile, model: &LinkModel) -> Self {
        let combos = combos(profile)
            .map(|(j, k, a, b, w)| {
                let state = PureState::from_theta(profile.theta_actual(j, Some(k)));
                let o = PulseKernel::new(&state, profile.mu_actual(a, Some(b)), model)
                    .outcome_probabilities();
                // Categories: [vacuum d0..d3, single d0..d3, multi d0..d3, no click].
                let mut cat = [0.0; 13];
                for d in 0..4 {
                    cat[d] = o.vacuum[d];
                    cat[4 + d] = o.single[d];
                    cat[8 + d] = (o.total[d] - o.vacuum[d] - o.single[d]).max(0.0);
                }
                cat[12] = (1.0 - o.total.iter().sum::<f64>()).max(0.0);
                (j, a, w, cat)
            })
            .collect();
        BlockSampler {
            combos,
            p_coherent: profile.phase_coherence,
        }
    }

    pub fn sample<R: Rng>(&self, n_pulses: u64, rng: &mut R) -> TallySet {
        let mut t = TallySet::empty(TallyKind::Sampled, true);
        t.elapsed_pulses = n_pulses as f64;
        let weights: Vec<f64> = self.combos.iter().map(|c| c.2).collect();
        let counts = multinomial(rng, n_pulses, &weights);
        for ((j, a, _, cat), &count) in self.combos.iter().zip(&counts) {
            t.sent[*j][*a] += count as f64;
            if count == 0 {
                continue;
            }
            let outcomes = multinomial(rng, count, cat);
            for d in Detector::ALL {
                let i = d.index();
                let (v, s, m) = (
                    outcomes[i] as f64,
                    outcomes[4 + i] as f64,
                    outcomes[8 + i] as f64,
                );
                t.cells.record(*j, *a, d, v + s + m);
                if let Some(tab) = t.single_photon.as_mut() {
                    tab.record(*j, *a, d, s);
                }
                if let Some(tab) = t.vacuum.as_mut() {
                    tab.record(*j, *a, d, v);
                }
            }
        }
        if n_pulses > 1 {
            t.coherent_pulses = binomial(rng, n_pulses - 1, self.p_coherent) as f64;
        }
        t
    }
}

fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).map(|b| b.sample(rng)).unwrap_or(0)
}

/// Multinomial draw by sequential conditional binomials.
fn multinomial<R: Rng>(rng: &mut R, n: u64, probs: &[f64]) -> Vec<u64> {
    let total: f64 = probs.iter().sum();
    let mut out = vec![0u64; probs.len()];
    let mut remaining = n;
    let mut mass = total;
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() {
            out[i] = remaining;
            break;
        }
        let q = if mass > 0.0 {
            (p / mass).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let x = binomial(rng, remaining, q);
        out[i] = x;
        remaining -= x;
        mass -= p;
    }
    out
}

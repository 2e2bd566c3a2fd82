//! Multi-user FedSGD around the malicious global model.
//!
//! Every round each user draws a batch from its local pool, runs one local
//! step through the distributed model, protects the resulting gradients and
//! uploads them. The server averages the target-model gradients of all
//! non-victims and keeps the victim's upload for the attack.

use crate::attack::{run_attack, AttackConfig, AttackResult};
use crate::data::{extract_subject, gen_synthetic_batch, ImageBatch, MaskProvider, SubjectSpec};
use crate::error::{Error, Result};
use crate::ldp::{protect, LdpConfig};
use crate::metrics::DiffHistogram;
use crate::model::{forward_backward, GlobalModel, GradientBundle, TargetModel};
use crate::numeric::{SeededRng, Tensor};

const STREAM_BATCH: u64 = 0;
const STREAM_NOISE: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Victim,
    NonTarget,
}

/// One participant with its local data and protection settings.
#[derive(Debug, Clone)]
pub struct UserState {
    pub id: usize,
    pub pool: ImageBatch,
    /// Subject-masked copy of `pool`.
    pub masked: ImageBatch,
    /// `None` uploads unprotected gradients.
    pub ldp: Option<LdpConfig>,
    pub role: Role,
    /// Output coefficient of the inference structure for this user.
    pub tau: f64,
}

impl UserState {
    pub fn new(id: usize, pool: ImageBatch, mask: &MaskProvider, ldp: Option<LdpConfig>, tau: f64) -> Result<Self> {
        let masked = extract_subject(&pool, mask)?;
        Ok(Self {
            id,
            pool,
            masked,
            ldp,
            role: Role::NonTarget,
            tau,
        })
    }
}

/// Marks `victim` (by user id) as the only victim with coefficient `tau`;
/// everyone else becomes a non-target with `tau_small`.
pub fn designate_victim(users: &mut [UserState], victim: Option<usize>, tau: f64, tau_small: f64) -> Result<()> {
    if let Some(v) = victim {
        if !users.iter().any(|u| u.id == v) {
            return Err(Error::UnknownUser(v));
        }
    }
    for u in users.iter_mut() {
        if Some(u.id) == victim {
            u.role = Role::Victim;
            u.tau = tau;
        } else {
            u.role = Role::NonTarget;
            u.tau = tau_small;
        }
    }
    Ok(())
}

/// What the victim uploaded, with the batch it trained on.
#[derive(Debug, Clone)]
pub struct VictimUpload {
    pub user: usize,
    pub bundle: GradientBundle,
    pub original: ImageBatch,
    pub masked: ImageBatch,
    pub true_units: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    /// Mean target-model gradient over the non-victims.
    pub aggregate: Vec<(String, Tensor)>,
    pub victim: Option<VictimUpload>,
    /// `(user id, uploaded bundle norm)`.
    pub norms: Vec<(usize, f64)>,
    /// `(user id, local loss)`.
    pub losses: Vec<(usize, f64)>,
}

impl RoundReport {
    /// Mean loss over every participating user.
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().map(|(_, l)| l).sum::<f64>() / self.losses.len().max(1) as f64
    }
}

/// Per-user stream of one round; depends only on the round stream and the
/// user id, so paired simulations share batches and noise.
fn user_stream(round_rng: &SeededRng, user: usize) -> SeededRng {
    round_rng.fork(user as u64)
}

fn local_step(user: &UserState, model: &GlobalModel, batch: usize, round_rng: &SeededRng) -> Result<(f64, GradientBundle, ImageBatch, ImageBatch, Vec<usize>)> {
    if batch == 0 || batch > user.pool.len() {
        return Err(Error::Config(format!(
            "user {} cannot draw a batch of {batch} from {} samples",
            user.id,
            user.pool.len()
        )));
    }
    let rng = user_stream(round_rng, user.id);
    let idx = rng.fork(STREAM_BATCH).sample_indices(user.pool.len(), batch);
    let original = user.pool.select(&idx)?;
    let masked = user.masked.select(&idx)?;
    let fr = forward_backward(model, &original, &masked, user.tau)?;
    let bundle = match &user.ldp {
        Some(cfg) => protect(fr.bundle, cfg, &mut rng.fork(STREAM_NOISE))?,
        None => fr.bundle,
    };
    let units = fr.reverse.iter().map(|r| r.unit).collect();
    Ok((fr.loss, bundle, original, masked, units))
}

fn target_entries(bundle: &GradientBundle, target: &TargetModel) -> Result<Vec<(String, Tensor)>> {
    target
        .params()
        .iter()
        .map(|(name, _)| Ok((name.to_string(), bundle.get(name)?.clone())))
        .collect()
}

fn mean_entries(parts: &[Vec<(String, Tensor)>]) -> Result<Vec<(String, Tensor)>> {
    let Some(first) = parts.first() else {
        return Err(Error::Aggregation("no non-target uploads to aggregate".into()));
    };
    let n = parts.len() as f64;
    let mut out = first.clone();
    for p in &parts[1..] {
        for ((_, acc), (_, t)) in out.iter_mut().zip(p) {
            acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, v)| *a += v);
        }
    }
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// One FedSGD round with the round's random stream `rng`.
pub fn run_round(
    users: &[UserState],
    model: &GlobalModel,
    round: usize,
    batch: usize,
    rng: &SeededRng,
) -> Result<RoundReport> {
    if users.iter().filter(|u| u.role == Role::Victim).count() > 1 {
        return Err(Error::Aggregation("at most one victim per round".into()));
    }
    let mut parts = Vec::with_capacity(users.len());
    let mut victim = None;
    let mut norms = Vec::with_capacity(users.len());
    let mut losses = Vec::with_capacity(users.len());
    for user in users {
        let (loss, bundle, original, masked, true_units) = local_step(user, model, batch, rng)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                round,
                reason: format!("user {} reported loss {loss}", user.id),
            });
        }
        norms.push((user.id, bundle.norm()));
        losses.push((user.id, loss));
        match user.role {
            Role::Victim => {
                victim = Some(VictimUpload {
                    user: user.id,
                    bundle,
                    original,
                    masked,
                    true_units,
                })
            }
            Role::NonTarget => parts.push(target_entries(&bundle, &model.target)?),
        }
    }
    Ok(RoundReport {
        round,
        aggregate: mean_entries(&parts)?,
        victim,
        norms,
        losses,
    })
}

/// `params <- params - lr * aggregate`.
pub fn apply_update(model: &mut GlobalModel, aggregate: &[(String, Tensor)], lr: f64) -> Result<()> {
    for (name, param) in model.target.params_mut() {
        let (_, g) = aggregate
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Aggregation(format!("aggregate lacks {name}")))?;
        if g.shape() != param.shape() {
            return Err(Error::Shape(format!("aggregate {name} has shape {:?}", g.shape())));
        }
        param.data_mut().iter_mut().zip(g.data()).for_each(|(p, v)| *p -= lr * v);
    }
    Ok(())
}

/// Fraction of `test` samples the target model classifies correctly.
pub fn accuracy(target: &TargetModel, test: &ImageBatch) -> f64 {
    let hits = (0..test.len())
        .filter(|&i| target.predict(test.sample(i)) == test.labels()[i])
        .count();
    hits as f64 / test.len().max(1) as f64
}

/// Round-by-round record of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub initial_accuracy: f64,
    /// Test accuracy after each round.
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
    /// Mean final PSNR of the attack on each round's victim, when attacked.
    pub attack_psnr: Vec<Option<f64>>,
}

impl TrainTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().copied().unwrap_or(self.initial_accuracy)
    }
}

/// Who is attacked in each round.
#[derive(Debug, Clone)]
pub enum VictimSchedule {
    None,
    /// Round `r` targets the user at position `r mod n`.
    RoundRobin { tau: f64, tau_small: f64 },
}

/// Settings shared by every round of a training run.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub rounds: usize,
    pub lr: f64,
    pub batch: usize,
    pub schedule: VictimSchedule,
    /// Attack every victim upload with these settings.
    pub attack: Option<AttackConfig>,
}

/// FedSGD training; round `r` uses the stream `rng.fork(r)`.
pub fn train(
    users: &mut [UserState],
    model: &mut GlobalModel,
    test: &ImageBatch,
    settings: &TrainSettings,
    rng: &SeededRng,
) -> Result<TrainTrace> {
    if users.is_empty() {
        return Err(Error::Aggregation("no users".into()));
    }
    let mut trace = TrainTrace {
        initial_accuracy: accuracy(&model.target, test),
        ..TrainTrace::default()
    };
    for round in 0..settings.rounds {
        let victim = match settings.schedule {
            VictimSchedule::None => None,
            VictimSchedule::RoundRobin { tau, tau_small } => {
                let v = users[round % users.len()].id;
                designate_victim(users, Some(v), tau, tau_small)?;
                Some(v)
            }
        };
        let round_rng = rng.fork(round as u64);
        let report = run_round(users, model, round, settings.batch, &round_rng)?;
        let psnr = match (&settings.attack, victim) {
            (Some(cfg), Some(_)) => Some(attack_upload(&report, model, cfg)?.1),
            _ => None,
        };
        apply_update(model, &report.aggregate, settings.lr)?;
        if model.target.params().iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                round,
                reason: "non-finite target parameters after update".into(),
            });
        }
        trace.loss.push(report.mean_loss());
        trace.accuracy.push(accuracy(&model.target, test));
        trace.attack_psnr.push(psnr);
    }
    Ok(trace)
}

fn attack_upload(report: &RoundReport, model: &GlobalModel, cfg: &AttackConfig) -> Result<(AttackResult, f64)> {
    let v = report
        .victim
        .as_ref()
        .ok_or_else(|| Error::Aggregation(format!("round {} has no victim", report.round)))?;
    let mut result = run_attack(&v.bundle.upload(), model.structure.config(), cfg)?;
    let q = result.score(&v.masked)?;
    let psnr = q.iter().map(|s| s.final_image.psnr).sum::<f64>() / q.len().max(1) as f64;
    Ok((result, psnr))
}

/// Runs a round targeting `victim` with the coefficients of
/// `settings.schedule` and attacks its upload.
pub fn attack_round(
    users: &mut [UserState],
    model: &GlobalModel,
    victim: usize,
    round: usize,
    settings: &TrainSettings,
    rng: &SeededRng,
) -> Result<(RoundReport, AttackResult)> {
    let VictimSchedule::RoundRobin { tau, tau_small } = settings.schedule else {
        return Err(Error::Config("attacking a round needs a victim schedule".into()));
    };
    designate_victim(users, Some(victim), tau, tau_small)?;
    let report = run_round(users, model, round, settings.batch, rng)?;
    let cfg = settings.attack.unwrap_or_default();
    let (result, _) = attack_upload(&report, model, &cfg)?;
    Ok((report, result))
}

/// Difference histogram between the aggregate with the attack (victim
/// excluded, non-targets at `tau_small`) and the aggregate without it (every
/// user at `tau = 0`), over `rounds` rounds along the attacked trajectory.
pub fn diff_histogram(
    users: &mut [UserState],
    model: &mut GlobalModel,
    settings: &TrainSettings,
    rng: &SeededRng,
) -> Result<DiffHistogram> {
    let VictimSchedule::RoundRobin { tau, tau_small } = settings.schedule else {
        return Err(Error::Config("the gradient-difference histogram needs a victim schedule".into()));
    };
    if users.len() < 2 {
        return Err(Error::Aggregation("the gradient-difference histogram needs two users".into()));
    }
    let mut hist = DiffHistogram::default();
    for round in 0..settings.rounds {
        let round_rng = rng.fork(round as u64);
        designate_victim(users, None, 0.0, 0.0)?;
        let without = run_round(users, model, round, settings.batch, &round_rng)?;
        let v = users[round % users.len()].id;
        designate_victim(users, Some(v), tau, tau_small)?;
        let with = run_round(users, model, round, settings.batch, &round_rng)?;
        hist.add(&with.aggregate, &without.aggregate)?;
        apply_update(model, &with.aggregate, settings.lr)?;
    }
    Ok(hist)
}

/// Builds `n` users with disjoint pools of `pool` samples each.
#[allow(clippy::too_many_arguments)]
pub fn make_users(
    n: usize,
    pool: usize,
    geometry: (usize, usize, usize),
    subject: &SubjectSpec,
    mask: &MaskProvider,
    ldp: Option<LdpConfig>,
    tau: f64,
    rng: &SeededRng,
) -> Result<Vec<UserState>> {
    let (c, h, w) = geometry;
    (0..n)
        .map(|id| {
            let data = gen_synthetic_batch(&mut rng.fork(id as u64), pool, c, h, w, subject)?;
            UserState::new(id, data, mask, ldp, tau)
        })
        .collect()
}

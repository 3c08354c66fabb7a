//! Behavior-gated fusion of modality views with the collaborative view, and
//! the cross-view contrastive loss.

use log::warn;

use crate::error::{Error, Result};
use crate::substrate::{xavier_init, Dense, ParamId, ParamStore, Rng, Scalar, Tape, Var};

/// Largest number of distinct rows contrasted per side in one batch.
pub const MAX_CONTRAST_ROWS: usize = 4096;

#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    /// `d×d` gate weight.
    pub w: ParamId,
    /// `1×d` gate bias.
    pub gate_bias: ParamId,
}

impl FusionParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, dim: usize, rng: &mut Rng) -> Self {
        FusionParams {
            w: store.add("fusion.w", xavier_init(dim, dim, rng)),
            gate_bias: store.add("fusion.gate_bias", Dense::zeros(1, dim)),
        }
    }
}

fn check_same(tape: &Tape<impl Scalar>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// `E_s = (1/|M|)·Σ_m Ê_m ⊙ σ(Ê_c·Wᵀ + b)`.
pub fn gated_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &FusionParams,
    modal: &[Var],
    e_c: Var,
) -> Result<Var> {
    if modal.is_empty() {
        return Err(Error::Config("gated fusion needs at least one modality".into()));
    }
    for &m in modal {
        check_same(tape, "gated_fuse", m, e_c)?;
    }
    let w = tape.param(store, params.w);
    let b = tape.param(store, params.gate_bias);
    let pre = tape.matmul_with(e_c, w, false, true)?;
    let pre = tape.add_row_bias(pre, b)?;
    let gate = tape.sigmoid(pre);
    let mut acc = tape.mul(modal[0], gate)?;
    for &m in &modal[1..] {
        let g = tape.mul(m, gate)?;
        acc = tape.add(acc, g)?;
    }
    Ok(tape.scale(acc, T::of(1.0 / modal.len() as f64)))
}

/// Ungated mean of the modality views.
pub fn mean_modal<T: Scalar>(tape: &mut Tape<T>, modal: &[Var]) -> Result<Var> {
    if modal.is_empty() {
        return Err(Error::Config("mean pooling needs at least one modality".into()));
    }
    let mut acc = modal[0];
    for &m in &modal[1..] {
        acc = tape.add(acc, m)?;
    }
    Ok(tape.scale(acc, T::of(1.0 / modal.len() as f64)))
}

/// Average pooling of the collaborative view and every modality view, used
/// in place of gated fusion when fusion is ablated.
pub fn average_pool<T: Scalar>(tape: &mut Tape<T>, modal: &[Var], e_c: Var) -> Result<Var> {
    let mut acc = e_c;
    for &m in modal {
        acc = tape.add(acc, m)?;
    }
    Ok(tape.scale(acc, T::of(1.0 / (modal.len() + 1) as f64)))
}

/// `E = E_s + Ê_c`.
pub fn final_embed<T: Scalar>(tape: &mut Tape<T>, e_s: Var, e_c: Var) -> Result<Var> {
    tape.add(e_s, e_c)
}

/// Options for the cross-view loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    /// Raw dot products with unit temperature, as the formula is printed.
    pub literal: bool,
}

/// Distinct indices in first-appearance order, capped.
pub fn contrast_rows(idx: &[usize], cap: usize) -> Vec<usize> {
    let mut seen = std::collections::HashSet::with_capacity(idx.len());
    idx.iter()
        .copied()
        .filter(|i| seen.insert(*i))
        .take(cap)
        .collect()
}

fn one_side<T: Scalar>(
    tape: &mut Tape<T>,
    e_s: Var,
    e_c: Var,
    rows: &[usize],
    cfg: ContrastConfig,
) -> Result<Var> {
    let s = tape.gather_rows(e_s, rows)?;
    let c = tape.gather_rows(e_c, rows)?;
    let (s, c, inv_tau) = if cfg.literal {
        (s, c, 1.0)
    } else {
        (tape.row_l2_normalize(s), tape.row_l2_normalize(c), 1.0 / cfg.tau)
    };
    let logits = tape.matmul_t(s, c)?;
    let logits = tape.scale(logits, T::of(inv_tau));
    tape.softmax_xent_diag(logits)
}

/// In-batch InfoNCE aligning `E_s` with `Ê_c`, summed over the user side and
/// the item side. `items` are item indices; their rows sit after the users.
pub fn cross_view_loss<T: Scalar>(
    tape: &mut Tape<T>,
    e_s: Var,
    e_c: Var,
    n_users: usize,
    users: &[usize],
    items: &[usize],
    cfg: ContrastConfig,
) -> Result<Var> {
    check_same(tape, "cross_view_loss", e_s, e_c)?;
    if !cfg.literal && cfg.tau <= 0.0 {
        return Err(Error::Config(format!("τ_cl must be positive, got {}", cfg.tau)));
    }
    let u = contrast_rows(users, MAX_CONTRAST_ROWS);
    let i: Vec<usize> = contrast_rows(items, MAX_CONTRAST_ROWS)
        .into_iter()
        .map(|i| n_users + i)
        .collect();
    let mut terms = Vec::new();
    for (side, rows) in [("user", u), ("item", i)] {
        if rows.len() < 2 {
            warn!("cross-view {side} batch has {} distinct row(s); term set to 0", rows.len());
            continue;
        }
        terms.push(one_side(tape, e_s, e_c, &rows, cfg)?);
    }
    match terms.as_slice() {
        [] => Ok(tape.scalar_constant(T::zero())),
        [a] => Ok(*a),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!("two sides at most"),
    }
}

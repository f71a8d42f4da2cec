//! Hierarchically sparse block vectors and their exact projections.
//!
//! A block vector is stored flat and user-major: user `i`, block `k`, entry
//! `j` lives at `(i * blocks + k) * block_len + j`. Two-level vectors have a
//! single user. An `(s, σ)`-sparse vector has at most `s` nonzero blocks,
//! each with at most `σ` nonzero entries; `(S, s, σ)` additionally allows at
//! most `S` nonzero users.
//!
//! The projections keep, per block, the `σ` entries of largest magnitude,
//! then the `s` blocks whose kept entries carry the most energy, then (three
//! levels) the `S` users with the most energy. Every selection is a
//! linear-time partial selection; ties always go to the lower index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Dimensions of a (possibly multi-user) block vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockShape {
    /// Number of users `N` (1 for two-level problems).
    pub users: usize,
    /// Blocks per user, the filter length `μ`.
    pub blocks: usize,
    /// Entries per block, the message length `n`.
    pub block_len: usize,
}

impl BlockShape {
    pub fn two_level(blocks: usize, block_len: usize) -> Self {
        Self {
            users: 1,
            blocks,
            block_len,
        }
    }

    pub fn three_level(users: usize, blocks: usize, block_len: usize) -> Self {
        Self {
            users,
            blocks,
            block_len,
        }
    }

    pub fn len(&self) -> usize {
        self.users * self.blocks * self.block_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn user_len(&self) -> usize {
        self.blocks * self.block_len
    }

    #[inline]
    pub fn index(&self, user: usize, block: usize, entry: usize) -> usize {
        (user * self.blocks + block) * self.block_len + entry
    }

    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.blocks == 0 || self.block_len == 0 {
            return Err(Error::Config(format!(
                "block shape has a zero dimension: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Number of sparsity levels a support describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Depth {
    Two,
    Three,
}

/// Sparsity budget: `s` active blocks of `σ` entries, optionally `S` active users.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparsityLevels {
    pub s: usize,
    pub sigma: usize,
    /// Active users `S` for three-level sparsity.
    pub users: Option<usize>,
}

impl SparsityLevels {
    pub fn new(s: usize, sigma: usize) -> Self {
        Self {
            s,
            sigma,
            users: None,
        }
    }

    pub fn three_level(users: usize, s: usize, sigma: usize) -> Self {
        Self {
            s,
            sigma,
            users: Some(users),
        }
    }

    pub fn depth(&self) -> Depth {
        if self.users.is_some() {
            Depth::Three
        } else {
            Depth::Two
        }
    }

    /// Checks `1 ≤ s ≤ μ`, `1 ≤ σ ≤ n` and, when present, `1 ≤ S ≤ N`.
    ///
    /// Two-level budgets require a single-user shape.
    pub fn validate(&self, shape: &BlockShape) -> Result<()> {
        shape.validate()?;
        if self.s == 0 || self.s > shape.blocks {
            return Err(Error::InvalidLevels(format!(
                "s = {} must lie in 1..={}",
                self.s, shape.blocks
            )));
        }
        if self.sigma == 0 || self.sigma > shape.block_len {
            return Err(Error::InvalidLevels(format!(
                "sigma = {} must lie in 1..={}",
                self.sigma, shape.block_len
            )));
        }
        match self.users {
            Some(active) if active == 0 || active > shape.users => Err(Error::InvalidLevels(
                format!("S = {} must lie in 1..={}", active, shape.users),
            )),
            None if shape.users != 1 => Err(Error::InvalidLevels(format!(
                "two-level sparsity on a vector with {} users",
                shape.users
            ))),
            _ => Ok(()),
        }
    }

    /// Maximum number of entries an admissible support can hold.
    pub fn max_cardinality(&self) -> usize {
        self.users.unwrap_or(1) * self.s * self.sigma
    }
}

/// One active block of a support together with its active entries.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActiveBlock {
    pub user: usize,
    pub block: usize,
    pub entries: Vec<usize>,
}

/// Nested support pattern: active blocks, each with its active entries.
///
/// Blocks are ordered by `(user, block)` and entries are strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HiSupport {
    shape: BlockShape,
    depth: Depth,
    blocks: Vec<ActiveBlock>,
}

impl HiSupport {
    pub fn new(shape: BlockShape, depth: Depth, blocks: Vec<ActiveBlock>) -> Result<Self> {
        shape.validate()?;
        if depth == Depth::Two && shape.users != 1 {
            return Err(Error::Config(
                "two-level support on a multi-user shape".to_string(),
            ));
        }
        let mut prev: Option<(usize, usize)> = None;
        for b in &blocks {
            if b.user >= shape.users || b.block >= shape.blocks {
                return Err(Error::OutOfRange(format!(
                    "block (user {}, block {}) outside {:?}",
                    b.user, b.block, shape
                )));
            }
            if let Some(p) = prev {
                if (b.user, b.block) <= p {
                    return Err(Error::OutOfRange(
                        "support blocks must be strictly increasing".to_string(),
                    ));
                }
            }
            prev = Some((b.user, b.block));
            for w in b.entries.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::OutOfRange(
                        "support entries must be strictly increasing".to_string(),
                    ));
                }
            }
            if let Some(&last) = b.entries.last() {
                if last >= shape.block_len {
                    return Err(Error::OutOfRange(format!(
                        "entry {} outside block of length {}",
                        last, shape.block_len
                    )));
                }
            }
        }
        Ok(Self {
            shape,
            depth,
            blocks,
        })
    }

    pub fn empty(shape: BlockShape, depth: Depth) -> Self {
        Self {
            shape,
            depth,
            blocks: Vec::new(),
        }
    }

    /// Every position of `shape`.
    pub fn full(shape: BlockShape, depth: Depth) -> Self {
        let blocks = (0..shape.users)
            .flat_map(|user| {
                (0..shape.blocks).map(move |block| ActiveBlock {
                    user,
                    block,
                    entries: (0..shape.block_len).collect(),
                })
            })
            .collect();
        Self {
            shape,
            depth,
            blocks,
        }
    }

    /// Support of the nonzero entries of `data`; blocks without nonzeros are omitted.
    pub fn of_nonzeros(shape: BlockShape, depth: Depth, data: &[f64]) -> Result<Self> {
        check_len("support of nonzeros", shape.len(), data.len())?;
        let mut blocks = Vec::new();
        for user in 0..shape.users {
            for block in 0..shape.blocks {
                let start = shape.index(user, block, 0);
                let entries: Vec<usize> = data[start..start + shape.block_len]
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, _)| j)
                    .collect();
                if !entries.is_empty() {
                    blocks.push(ActiveBlock {
                        user,
                        block,
                        entries,
                    });
                }
            }
        }
        Ok(Self {
            shape,
            depth,
            blocks,
        })
    }

    pub fn shape(&self) -> BlockShape {
        self.shape
    }

    pub fn depth(&self) -> Depth {
        self.depth
    }

    pub fn blocks(&self) -> &[ActiveBlock] {
        &self.blocks
    }

    pub fn cardinality(&self) -> usize {
        self.blocks.iter().map(|b| b.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cardinality() == 0
    }

    /// Flat indices of all active entries, ascending.
    pub fn flat_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cardinality());
        for b in &self.blocks {
            let start = self.shape.index(b.user, b.block, 0);
            out.extend(b.entries.iter().map(|&j| start + j));
        }
        out
    }

    /// Distinct users with at least one active block, ascending.
    pub fn active_users(&self) -> Vec<usize> {
        let mut users: Vec<usize> = self.blocks.iter().map(|b| b.user).collect();
        users.dedup();
        users
    }

    /// Whether the pattern respects the `levels` budget.
    pub fn satisfies(&self, levels: &SparsityLevels) -> bool {
        if self.blocks.iter().any(|b| b.entries.len() > levels.sigma) {
            return false;
        }
        let users = self.active_users();
        if users.len() > levels.users.unwrap_or(1) {
            return false;
        }
        users
            .iter()
            .all(|&u| self.blocks.iter().filter(|b| b.user == u).count() <= levels.s)
    }

    /// Whether `other` covers every active entry of `self`.
    pub fn is_subset_of(&self, other: &HiSupport) -> bool {
        let theirs = other.flat_indices();
        self.flat_indices()
            .iter()
            .all(|i| theirs.binary_search(i).is_ok())
    }
}

/// Dense block vector with optional support metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiSparseVector {
    shape: BlockShape,
    data: Vec<f64>,
    support: Option<HiSupport>,
}

impl HiSparseVector {
    pub fn new(shape: BlockShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        check_len("block vector", shape.len(), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("block vector"));
        }
        Ok(Self {
            shape,
            data,
            support: None,
        })
    }

    pub fn zeros(shape: BlockShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
            support: None,
        }
    }

    /// The lifted vector `h ⊗ b`: block `k` equals `h[k] · b`.
    pub fn from_factors(h: &[f64], b: &[f64]) -> Result<Self> {
        let shape = BlockShape::two_level(h.len(), b.len());
        let data = h
            .iter()
            .flat_map(|&hk| b.iter().map(move |&bj| hk * bj))
            .collect();
        Self::new(shape, data)
    }

    /// Stacks per-user two-level vectors into one three-level vector.
    pub fn stack_users(users: &[HiSparseVector]) -> Result<Self> {
        let first = users
            .first()
            .ok_or_else(|| Error::Config("no users to stack".to_string()))?;
        let inner = first.shape;
        let shape = BlockShape::three_level(users.len(), inner.blocks, inner.block_len);
        let mut data = Vec::with_capacity(shape.len());
        for u in users {
            if u.shape != inner {
                return Err(Error::DimensionMismatch {
                    context: "stacked user block",
                    expected: inner.len(),
                    actual: u.shape.len(),
                });
            }
            data.extend_from_slice(&u.data);
        }
        Self::new(shape, data)
    }

    /// Attaches `support` after checking that `data` vanishes outside it.
    pub fn with_support(mut self, support: HiSupport) -> Result<Self> {
        if support.shape != self.shape {
            return Err(Error::Config(
                "support shape differs from vector shape".to_string(),
            ));
        }
        let mut mask = vec![false; self.data.len()];
        for i in support.flat_indices() {
            mask[i] = true;
        }
        if self
            .data
            .iter()
            .zip(&mask)
            .any(|(v, inside)| !inside && *v != 0.0)
        {
            return Err(Error::OutOfRange(
                "vector has nonzero entries outside the declared support".to_string(),
            ));
        }
        self.support = Some(support);
        Ok(self)
    }

    pub fn shape(&self) -> BlockShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn support(&self) -> Option<&HiSupport> {
        self.support.as_ref()
    }

    pub fn block(&self, user: usize, block: usize) -> &[f64] {
        let start = self.shape.index(user, block, 0);
        &self.data[start..start + self.shape.block_len]
    }

    pub fn user(&self, user: usize) -> &[f64] {
        let len = self.shape.user_len();
        &self.data[user * len..(user + 1) * len]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// Orders candidates by decreasing key, then increasing index.
#[inline]
fn by_key_desc(keys: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest keys (ties to the lower index), ascending.
///
/// Uses a partial selection, linear in `keys.len()` on average.
fn top_k(keys: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_key_desc(keys));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Projects one user's `μ × n` slice; returns its kept blocks and their energy.
fn project_user(
    data: &[f64],
    shape: &BlockShape,
    user: usize,
    s: usize,
    sigma: usize,
    squares: &mut Vec<f64>,
) -> (Vec<ActiveBlock>, f64) {
    let n = shape.block_len;
    let mut kept_entries = Vec::with_capacity(shape.blocks);
    let mut scores = Vec::with_capacity(shape.blocks);
    for block in data.chunks_exact(n) {
        squares.clear();
        squares.extend(block.iter().map(|v| v * v));
        let entries = top_k(squares, sigma);
        scores.push(entries.iter().map(|&j| squares[j]).sum::<f64>());
        kept_entries.push(entries);
    }
    let kept_blocks = top_k(&scores, s);
    let energy = kept_blocks.iter().map(|&k| scores[k]).sum();
    let blocks = kept_blocks
        .into_iter()
        .map(|k| ActiveBlock {
            user,
            block: k,
            entries: std::mem::take(&mut kept_entries[k]),
        })
        .collect();
    (blocks, energy)
}

fn materialize(w: &HiSparseVector, support: HiSupport) -> HiSparseVector {
    let mut data = vec![0.0; w.data.len()];
    for i in support.flat_indices() {
        data[i] = w.data[i];
    }
    HiSparseVector {
        shape: w.shape,
        data,
        support: Some(support),
    }
}

/// Euclidean projection onto `(s, σ)`-sparse vectors.
///
/// The returned support lists every kept position, including kept entries
/// that happen to be zero, so it always has `s` blocks of `σ` entries.
pub fn project_hisparse(
    w: &HiSparseVector,
    levels: &SparsityLevels,
) -> Result<(HiSparseVector, HiSupport)> {
    if levels.users.is_some() {
        return Err(Error::InvalidLevels(
            "two-level projection given a three-level budget".to_string(),
        ));
    }
    levels.validate(&w.shape)?;
    let mut squares = Vec::with_capacity(w.shape.block_len);
    let (blocks, _) = project_user(&w.data, &w.shape, 0, levels.s, levels.sigma, &mut squares);
    let support = HiSupport {
        shape: w.shape,
        depth: Depth::Two,
        blocks,
    };
    Ok((materialize(w, support.clone()), support))
}

/// Euclidean projection onto `(S, s, σ)`-sparse vectors.
pub fn project_three_level(
    w: &HiSparseVector,
    levels: &SparsityLevels,
) -> Result<(HiSparseVector, HiSupport)> {
    let active = levels.users.ok_or_else(|| {
        Error::InvalidLevels("three-level projection needs an active-user budget".to_string())
    })?;
    levels.validate(&w.shape)?;
    let shape = w.shape;
    let mut squares = Vec::with_capacity(shape.block_len);
    let mut per_user = Vec::with_capacity(shape.users);
    let mut energies = Vec::with_capacity(shape.users);
    for user in 0..shape.users {
        let (blocks, energy) = project_user(
            w.user(user),
            &shape,
            user,
            levels.s,
            levels.sigma,
            &mut squares,
        );
        per_user.push(blocks);
        energies.push(energy);
    }
    let blocks = top_k(&energies, active)
        .into_iter()
        .flat_map(|u| std::mem::take(&mut per_user[u]))
        .collect();
    let support = HiSupport {
        shape,
        depth: Depth::Three,
        blocks,
    };
    Ok((materialize(w, support.clone()), support))
}

/// Dispatches to the two- or three-level projection based on `levels`.
pub fn project(w: &HiSparseVector, levels: &SparsityLevels) -> Result<(HiSparseVector, HiSupport)> {
    match levels.depth() {
        Depth::Two => project_hisparse(w, levels),
        Depth::Three => project_three_level(w, levels),
    }
}

/// Zeros every entry of `w` outside `support`.
pub fn restrict(w: &HiSparseVector, support: &HiSupport) -> Result<HiSparseVector> {
    if support.shape != w.shape {
        return Err(Error::OutOfRange(format!(
            "support shape {:?} does not match vector shape {:?}",
            support.shape, w.shape
        )));
    }
    Ok(materialize(w, support.clone()))
}

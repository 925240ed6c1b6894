//! Category metadata, evaluation bins, and the group partition that backs
//! the group-softmax head.
//!
//! Foreground categories carry ids `1..=C`; id 0 is reserved for background.
//! Categories are partitioned into groups by training-instance count using
//! half-open intervals `[low, high)`, and the partition fixes a flat logit
//! layout: the background group first (background node, then its others
//! node), then each foreground group as member slots in ascending category
//! id followed by the group's others slot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Category id of the background class.
pub const BACKGROUND: u32 = 0;

/// Number of evaluation bins.
pub const NUM_BINS: usize = 4;

/// Foreground categories with their training-instance counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    num_foreground: usize,
    counts: Vec<u64>,
}

impl ClassCatalog {
    /// `counts[j - 1]` is the instance count of category `j`.
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::config("catalog needs at least one foreground category"));
        }
        Ok(ClassCatalog { num_foreground: counts.len(), counts })
    }

    pub fn num_foreground(&self) -> usize {
        self.num_foreground
    }

    /// Instance count of foreground category `j` (1-based).
    pub fn count(&self, category: u32) -> u64 {
        assert!(category >= 1 && (category as usize) <= self.num_foreground);
        self.counts[category as usize - 1]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.counts.len() != self.num_foreground {
            return Err(Error::data("catalog counts inconsistent with num_foreground"));
        }
        Ok(())
    }
}

/// Evaluation bin for an instance count: half-open decades `[10^(i-1), 10^i)`,
/// clamped to bin 4 above 10^3. Counts below 1 fall in bin 1.
pub fn bin_of(count: u64) -> usize {
    if count < 10 {
        1
    } else if count < 100 {
        2
    } else if count < 1000 {
        3
    } else {
        4
    }
}

/// One group's count interval; `high = None` means unbounded above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundary {
    pub low: u64,
    pub high: Option<u64>,
}

impl Boundary {
    pub fn new(low: u64, high: Option<u64>) -> Self {
        Boundary { low, high }
    }

    fn contains(&self, count: u64) -> bool {
        count >= self.low && self.high.map_or(true, |h| count < h)
    }
}

/// The boundaries used throughout: (0,10), (10,100), (100,1000), (1000,inf).
pub fn default_boundaries() -> Vec<Boundary> {
    vec![
        Boundary::new(0, Some(10)),
        Boundary::new(10, Some(100)),
        Boundary::new(100, Some(1000)),
        Boundary::new(1000, None),
    ]
}

/// Contiguous boundaries for `n` groups with thresholds spaced evenly in
/// log-count space over [1, 10^3]. `n = 4` reproduces [`default_boundaries`].
pub fn boundaries_for_groups(n: usize) -> Result<Vec<Boundary>> {
    if n == 0 {
        return Err(Error::config("group count must be at least 1"));
    }
    let mut thresholds = Vec::with_capacity(n.saturating_sub(1));
    let mut prev = 0u64;
    for i in 1..n {
        let mut t = 10f64.powf(3.0 * i as f64 / (n - 1) as f64).round() as u64;
        if t <= prev {
            t = prev + 1;
        }
        thresholds.push(t);
        prev = t;
    }
    let mut boundaries = Vec::with_capacity(n);
    let mut low = 0u64;
    for &t in &thresholds {
        boundaries.push(Boundary::new(low, Some(t)));
        low = t;
    }
    boundaries.push(Boundary::new(low, None));
    Ok(boundaries)
}

/// A node of the flat logit layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    /// Background node of the background group.
    Background,
    /// Others node of the background group.
    BackgroundOthers,
    /// Member slot for a category (0 = background only when the background
    /// group is disabled).
    Category(u32),
    /// Others slot of foreground group `n` (0-based).
    GroupOthers(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawPartition {
    boundaries: Vec<Boundary>,
    groups: Vec<Vec<u32>>,
    has_others: bool,
    has_g0: bool,
    num_foreground: usize,
}

/// Group structure over categories plus the derived logit layout.
///
/// The standard head has both an others slot per foreground group and the
/// dedicated background group; the reduced variants (no others slots, or
/// background folded into the highest-count group) exist for ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPartition", into = "RawPartition")]
pub struct GroupPartition {
    boundaries: Vec<Boundary>,
    /// Member category ids per foreground group, ascending.
    groups: Vec<Vec<u32>>,
    has_others: bool,
    has_g0: bool,
    num_foreground: usize,
    /// category id -> (group, slot); `None` for background under has_g0.
    placement: Vec<Option<(usize, usize)>>,
    /// Flat logit index where each foreground group's slice starts.
    offsets: Vec<usize>,
}

impl From<GroupPartition> for RawPartition {
    fn from(p: GroupPartition) -> Self {
        RawPartition {
            boundaries: p.boundaries,
            groups: p.groups,
            has_others: p.has_others,
            has_g0: p.has_g0,
            num_foreground: p.num_foreground,
        }
    }
}

impl TryFrom<RawPartition> for GroupPartition {
    type Error = Error;

    fn try_from(raw: RawPartition) -> Result<Self> {
        GroupPartition::from_parts(raw.boundaries, raw.groups, raw.has_others, raw.has_g0, raw.num_foreground)
    }
}

impl GroupPartition {
    /// Partition with others slots and the dedicated background group.
    pub fn assign(catalog: &ClassCatalog, boundaries: &[Boundary]) -> Result<Self> {
        Self::assign_with_options(catalog, boundaries, true, true)
    }

    /// Partition with explicit control over others slots and the background
    /// group. Without a background group, category 0 joins the last
    /// (highest-count) group.
    pub fn assign_with_options(
        catalog: &ClassCatalog,
        boundaries: &[Boundary],
        has_others: bool,
        has_g0: bool,
    ) -> Result<Self> {
        validate_boundaries(boundaries)?;
        let c = catalog.num_foreground();
        let mut groups: Vec<Vec<u32>> = vec![Vec::new(); boundaries.len()];
        if !has_g0 {
            // Background has by far the most instances; the count rule puts
            // it in the unbounded top group.
            groups.last_mut().unwrap().push(BACKGROUND);
        }
        for j in 1..=c as u32 {
            let count = catalog.count(j);
            let group = boundaries
                .iter()
                .position(|b| b.contains(count))
                .ok_or_else(|| Error::config(format!("count {count} not covered by boundaries")))?;
            groups[group].push(j);
        }
        for members in &mut groups {
            members.sort_unstable();
        }
        Self::from_parts(boundaries.to_vec(), groups, has_others, has_g0, c)
    }

    fn from_parts(
        boundaries: Vec<Boundary>,
        groups: Vec<Vec<u32>>,
        has_others: bool,
        has_g0: bool,
        num_foreground: usize,
    ) -> Result<Self> {
        validate_boundaries(&boundaries)?;
        if groups.len() != boundaries.len() {
            return Err(Error::data("group list does not match boundaries"));
        }
        let mut placement: Vec<Option<(usize, usize)>> = vec![None; num_foreground + 1];
        let mut member_total = 0usize;
        for (n, members) in groups.iter().enumerate() {
            for (slot, &cat) in members.iter().enumerate() {
                if cat as usize > num_foreground {
                    return Err(Error::data(format!("category {cat} out of range")));
                }
                if placement[cat as usize].is_some() {
                    return Err(Error::data(format!("category {cat} assigned to multiple groups")));
                }
                placement[cat as usize] = Some((n, slot));
                member_total += 1;
            }
        }
        let expect = num_foreground + usize::from(!has_g0);
        if member_total != expect {
            return Err(Error::data("groups do not cover every category exactly once"));
        }
        if has_g0 && placement[BACKGROUND as usize].is_some() {
            return Err(Error::data("background cannot be a group member alongside the background group"));
        }
        let mut offsets = Vec::with_capacity(groups.len());
        let mut next = if has_g0 { 2 } else { 0 };
        for members in &groups {
            offsets.push(next);
            next += members.len() + usize::from(has_others);
        }
        Ok(GroupPartition {
            boundaries,
            groups,
            has_others,
            has_g0,
            num_foreground,
            placement,
            offsets,
        })
    }

    pub fn num_fg_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_foreground(&self) -> usize {
        self.num_foreground
    }

    pub fn has_others(&self) -> bool {
        self.has_others
    }

    pub fn has_g0(&self) -> bool {
        self.has_g0
    }

    pub fn boundaries(&self) -> &[Boundary] {
        &self.boundaries
    }

    /// Total number of logit nodes. For the standard head this equals
    /// (C + 1) + (N + 1).
    pub fn logit_dim(&self) -> usize {
        let g0 = if self.has_g0 { 2 } else { 0 };
        let others = if self.has_others { self.groups.len() } else { 0 };
        g0 + self.num_foreground + usize::from(!self.has_g0) + others
    }

    /// Group index (0-based) of a category; `None` for background when the
    /// background group is active.
    pub fn group_of(&self, category: u32) -> Option<usize> {
        self.placement[category as usize].map(|(g, _)| g)
    }

    /// Within-group member slot of a category.
    pub fn slot_of(&self, category: u32) -> Option<usize> {
        self.placement[category as usize].map(|(_, s)| s)
    }

    pub fn group_members(&self, group: usize) -> &[u32] {
        &self.groups[group]
    }

    /// Flat logit indices covered by foreground group `group`, including its
    /// others slot when present.
    pub fn group_slice(&self, group: usize) -> std::ops::Range<usize> {
        let start = self.offsets[group];
        start..start + self.groups[group].len() + usize::from(self.has_others)
    }

    /// Flat index of a group's others slot.
    pub fn others_index(&self, group: usize) -> Option<usize> {
        if self.has_others {
            Some(self.offsets[group] + self.groups[group].len())
        } else {
            None
        }
    }

    pub fn g0_background_index(&self) -> Option<usize> {
        if self.has_g0 {
            Some(0)
        } else {
            None
        }
    }

    pub fn g0_others_index(&self) -> Option<usize> {
        if self.has_g0 {
            Some(1)
        } else {
            None
        }
    }

    /// Flat logit index holding a category's own prediction.
    pub fn category_index(&self, category: u32) -> usize {
        if category == BACKGROUND {
            if let Some(idx) = self.g0_background_index() {
                return idx;
            }
        }
        let (g, s) = self.placement[category as usize].expect("category placed in a group");
        self.offsets[g] + s
    }

    /// The full layout: a bijection between flat indices and nodes.
    pub fn nodes(&self) -> Vec<Node> {
        let mut nodes = Vec::with_capacity(self.logit_dim());
        if self.has_g0 {
            nodes.push(Node::Background);
            nodes.push(Node::BackgroundOthers);
        }
        for (n, members) in self.groups.iter().enumerate() {
            for &cat in members {
                nodes.push(Node::Category(cat));
            }
            if self.has_others {
                nodes.push(Node::GroupOthers(n));
            }
        }
        nodes
    }
}

fn validate_boundaries(boundaries: &[Boundary]) -> Result<()> {
    if boundaries.is_empty() {
        return Err(Error::config("boundaries must be non-empty"));
    }
    if boundaries[0].low != 0 {
        return Err(Error::config("first boundary must start at 0"));
    }
    for pair in boundaries.windows(2) {
        match pair[0].high {
            Some(h) if h == pair[1].low && h > pair[0].low => {}
            _ => return Err(Error::config("boundaries must be contiguous and non-overlapping")),
        }
    }
    if boundaries.last().unwrap().high.is_some() {
        return Err(Error::config("last boundary must be unbounded above"));
    }
    Ok(())
}

//! The flow search space: passes, repetition, ordering constraints, and the
//! exact counting, enumeration, validation and sampling of flows over it.

use std::collections::HashSet;
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator used by the canonical text form of a flow.
pub const FLOW_SEPARATOR: char = ';';

/// Default bound on the number of multiset states visited by the
/// constrained counter.
pub const DEFAULT_STATE_LIMIT: usize = 1 << 21;

/// Default bound on the size of a space handed to [`enumerate_flows`].
pub const DEFAULT_ENUMERATION_LIMIT: u64 = 1_000_000;

/// A set of distinct transformations, each applied exactly `repetition`
/// times, plus precedence constraints between passes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct FlowSpaceSpec {
    transformations: Vec<String>,
    repetition: usize,
    constraints: Vec<(usize, usize)>,
}

/// Serialized form: constraints are given by pass name.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawSpec {
    transformations: Vec<String>,
    repetition: usize,
    #[serde(default)]
    constraints: Vec<(String, String)>,
}

impl TryFrom<RawSpec> for FlowSpaceSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let mut spec = FlowSpaceSpec::new(raw.transformations, raw.repetition)?;
        for (a, b) in &raw.constraints {
            spec = spec.with_constraint(a, b)?;
        }
        Ok(spec)
    }
}

impl From<FlowSpaceSpec> for RawSpec {
    fn from(spec: FlowSpaceSpec) -> Self {
        let constraints = spec
            .constraints
            .iter()
            .map(|&(a, b)| {
                (
                    spec.transformations[a].clone(),
                    spec.transformations[b].clone(),
                )
            })
            .collect();
        RawSpec {
            transformations: spec.transformations,
            repetition: spec.repetition,
            constraints,
        }
    }
}

impl FlowSpaceSpec {
    pub fn new<S: Into<String>>(
        transformations: impl IntoIterator<Item = S>,
        repetition: usize,
    ) -> Result<Self> {
        let transformations: Vec<String> = transformations.into_iter().map(Into::into).collect();
        if transformations.is_empty() {
            return Err(Error::InvalidSpec("at least one transformation is required".into()));
        }
        if transformations.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidSpec("too many transformations".into()));
        }
        if repetition == 0 {
            return Err(Error::InvalidSpec("repetition must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for name in &transformations {
            if name.trim().is_empty() {
                return Err(Error::InvalidSpec("pass names must be non-empty".into()));
            }
            if name.contains(FLOW_SEPARATOR) || name.contains('\n') {
                return Err(Error::InvalidSpec(format!(
                    "pass name `{name}` contains a reserved character"
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate pass name `{name}`")));
            }
        }
        Ok(FlowSpaceSpec {
            transformations,
            repetition,
            constraints: Vec::new(),
        })
    }

    /// Passes named `p0`, `p1`, ... as in the worked examples.
    pub fn numbered(pass_count: usize, repetition: usize) -> Result<Self> {
        Self::new((0..pass_count).map(|i| format!("p{i}")), repetition)
    }

    /// Adds "every occurrence of `before` precedes every occurrence of `after`".
    pub fn with_constraint(self, before: &str, after: &str) -> Result<Self> {
        let a = self.require_index(before)?;
        let b = self.require_index(after)?;
        self.with_constraint_index(a, b)
    }

    pub fn with_constraint_index(mut self, before: usize, after: usize) -> Result<Self> {
        let n = self.pass_count();
        if before >= n || after >= n {
            return Err(Error::InvalidSpec(format!(
                "constraint ({before}, {after}) references a pass outside 0..{n}"
            )));
        }
        if before == after {
            return Err(Error::InvalidSpec(format!(
                "pass `{}` cannot precede itself",
                self.transformations[before]
            )));
        }
        if !self.constraints.contains(&(before, after)) {
            self.constraints.push((before, after));
        }
        if self.has_cycle() {
            return Err(Error::InvalidSpec(format!(
                "constraint ({}, {}) closes a precedence cycle",
                self.transformations[before], self.transformations[after]
            )));
        }
        Ok(self)
    }

    fn require_index(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown pass `{name}`")))
    }

    fn has_cycle(&self) -> bool {
        // Kahn's algorithm over the precedence graph.
        let n = self.pass_count();
        let mut indegree = vec![0usize; n];
        for &(_, b) in &self.constraints {
            indegree[b] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut visited = 0;
        while let Some(i) = ready.pop() {
            visited += 1;
            for &(a, b) in &self.constraints {
                if a == i {
                    indegree[b] -= 1;
                    if indegree[b] == 0 {
                        ready.push(b);
                    }
                }
            }
        }
        visited != n
    }

    pub fn transformations(&self) -> &[String] {
        &self.transformations
    }

    pub fn pass_count(&self) -> usize {
        self.transformations.len()
    }

    pub fn repetition(&self) -> usize {
        self.repetition
    }

    pub fn constraints(&self) -> &[(usize, usize)] {
        &self.constraints
    }

    /// L = n * m.
    pub fn flow_len(&self) -> usize {
        self.pass_count() * self.repetition
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.transformations.iter().position(|p| p == name)
    }

    pub fn pass_name(&self, index: usize) -> Option<&str> {
        self.transformations.get(index).map(String::as_str)
    }

    /// Parses the `;`-joined canonical form. Multiplicity and constraints are
    /// not checked here; see [`validate_flow`].
    pub fn parse_flow(&self, text: &str) -> Result<Flow> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(Flow::new(Vec::new()));
        }
        text.split(FLOW_SEPARATOR)
            .map(|name| {
                self.index_of(name.trim())
                    .map(|i| i as u16)
                    .ok_or_else(|| Error::InvalidFlow(format!("unknown pass `{name}` in `{text}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Flow::new)
    }

    /// Whether pass `pass` may be appended to a prefix with the given per-pass
    /// occurrence counts.
    fn may_append(&self, counts: &[usize], pass: usize) -> bool {
        counts[pass] < self.repetition
            && self
                .constraints
                .iter()
                .all(|&(a, b)| b != pass || counts[a] == self.repetition)
    }
}

/// One concrete flow: a sequence of pass indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Flow {
    steps: Vec<u16>,
}

impl Flow {
    pub fn new(steps: Vec<u16>) -> Self {
        Flow { steps }
    }

    pub fn from_indices(indices: &[usize]) -> Self {
        Flow::new(indices.iter().map(|&i| i as u16).collect())
    }

    pub fn steps(&self) -> &[u16] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Pass names joined by `;`.
    pub fn to_canonical(&self, spec: &FlowSpaceSpec) -> String {
        self.display(spec).to_string()
    }

    pub fn display<'a>(&'a self, spec: &'a FlowSpaceSpec) -> FlowDisplay<'a> {
        FlowDisplay { flow: self, spec }
    }

    /// Per-pass occurrence counts; out-of-range indices are ignored.
    pub fn pass_counts(&self, pass_count: usize) -> Vec<usize> {
        let mut counts = vec![0; pass_count];
        for &s in &self.steps {
            if let Some(c) = counts.get_mut(usize::from(s)) {
                *c += 1;
            }
        }
        counts
    }
}

pub struct FlowDisplay<'a> {
    flow: &'a Flow,
    spec: &'a FlowSpaceSpec,
}

impl fmt::Display for FlowDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (j, &s) in self.flow.steps.iter().enumerate() {
            if j > 0 {
                write!(f, "{FLOW_SEPARATOR}")?;
            }
            match self.spec.pass_name(usize::from(s)) {
                Some(name) => f.write_str(name)?,
                None => write!(f, "#{s}")?,
            }
        }
        Ok(())
    }
}

/// Binomial coefficient over arbitrary-precision integers; zero when k > n.
pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        // exact at every step: acc = C(n, i) * (n - i) / (i + 1) = C(n, i + 1)
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Number of length-`len` sequences over `pass_count` symbols in which no
/// symbol occurs more than `repetition` times.
///
/// Evaluated with the recursion
/// `f(n, L+1, m) = n f(n, L, m) - n C(L, m) f(n-1, L-m, m)` over a memo table,
/// with `f(n, 0, m) = 1`, `f(0, L, m) = 0` for `L > 0` and `f(n, L, m) = 0`
/// for `L > n m`. Negative arguments are unrepresentable; `repetition == 0` is
/// rejected.
pub fn count_flows(pass_count: usize, len: usize, repetition: usize) -> Result<BigUint> {
    if repetition == 0 {
        return Err(Error::Argument("repetition must be at least 1".into()));
    }
    let cap = pass_count.saturating_mul(repetition);
    if len > cap {
        return Ok(BigUint::zero());
    }
    let m = repetition;
    // table[k][l] = f(k, l, m) for k <= pass_count, l <= len
    let mut table: Vec<Vec<BigUint>> = Vec::with_capacity(pass_count + 1);
    table.push(
        (0..=len)
            .map(|l| if l == 0 { BigUint::one() } else { BigUint::zero() })
            .collect(),
    );
    let binomials: Vec<BigUint> = (0..=len).map(|l| binomial(l, m)).collect();
    for k in 1..=pass_count {
        let kb = BigUint::from(k);
        let mut row = Vec::with_capacity(len + 1);
        row.push(BigUint::one());
        for l in 0..len {
            let next = if l + 1 > k * m {
                BigUint::zero()
            } else {
                let grow = &kb * &row[l];
                let overflow = if l >= m {
                    &kb * &binomials[l] * &table[k - 1][l - m]
                } else {
                    BigUint::zero()
                };
                grow - overflow
            };
            row.push(next);
        }
        table.push(row);
    }
    Ok(table[pass_count][len].clone())
}

/// Number of complete flows (length `n * m`, each pass exactly `m` times)
/// satisfying every precedence constraint of `spec`.
pub fn count_flows_full(spec: &FlowSpaceSpec) -> Result<BigUint> {
    count_flows_full_with_limit(spec, DEFAULT_STATE_LIMIT)
}

pub fn count_flows_full_with_limit(spec: &FlowSpaceSpec, state_limit: usize) -> Result<BigUint> {
    let n = spec.pass_count();
    let m = spec.repetition();
    if spec.constraints().is_empty() {
        return count_flows(n, n * m, m);
    }

    // Paths through the lattice of per-pass occurrence counts, indexed in
    // mixed radix (m + 1). Appending a pass only ever increases the index.
    let radix = m + 1;
    let states = (0..n)
        .try_fold(1usize, |acc, _| acc.checked_mul(radix))
        .filter(|&s| s <= state_limit)
        .ok_or_else(|| {
            Error::Capacity(format!(
                "{radix}^{n} multiset states exceed the limit of {state_limit}; \
                 drop the constraints to use the closed form, or sample instead"
            ))
        })?;
    let strides: Vec<usize> = (0..n).map(|i| radix.pow(i as u32)).collect();

    let mut ways = vec![BigUint::zero(); states];
    ways[0] = BigUint::one();
    let mut counts = vec![0usize; n];
    for index in 0..states {
        if !ways[index].is_zero() {
            decode_state(index, radix, &mut counts);
            for (pass, stride) in strides.iter().enumerate() {
                if spec.may_append(&counts, pass) {
                    let (lo, hi) = ways.split_at_mut(index + stride);
                    hi[0] += &lo[index];
                }
            }
        }
    }
    Ok(ways.pop().unwrap_or_default())
}

fn decode_state(mut index: usize, radix: usize, counts: &mut [usize]) {
    for c in counts.iter_mut() {
        *c = index % radix;
        index /= radix;
    }
}

/// A single problem found by [`validate_flow`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Length { expected: usize, actual: usize },
    UnknownPass { position: usize, index: u16 },
    Multiplicity { pass: usize, expected: usize, actual: usize },
    Precedence { before: usize, after: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Length { expected, actual } => {
                write!(f, "length {actual}, expected {expected}")
            }
            Violation::UnknownPass { position, index } => {
                write!(f, "step {position} uses unknown pass index {index}")
            }
            Violation::Multiplicity {
                pass,
                expected,
                actual,
            } => write!(f, "pass {pass} occurs {actual} times, expected {expected}"),
            Violation::Precedence { before, after } => {
                write!(f, "pass {after} occurs before pass {before} completes")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self, flow: &Flow, spec: &FlowSpaceSpec) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let details: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        Err(Error::InvalidFlow(format!(
            "`{}`: {}",
            flow.display(spec),
            details.join("; ")
        )))
    }
}

/// Reports every length, multiplicity and precedence violation of `flow`.
pub fn validate_flow(spec: &FlowSpaceSpec, flow: &Flow) -> ValidityReport {
    let n = spec.pass_count();
    let m = spec.repetition();
    let mut violations = Vec::new();
    if flow.len() != spec.flow_len() {
        violations.push(Violation::Length {
            expected: spec.flow_len(),
            actual: flow.len(),
        });
    }
    let mut first = vec![usize::MAX; n];
    let mut last = vec![None; n];
    for (position, &index) in flow.steps().iter().enumerate() {
        let pass = usize::from(index);
        if pass >= n {
            violations.push(Violation::UnknownPass { position, index });
            continue;
        }
        first[pass] = first[pass].min(position);
        last[pass] = Some(position);
    }
    for (pass, &actual) in flow.pass_counts(n).iter().enumerate() {
        if actual != m {
            violations.push(Violation::Multiplicity {
                pass,
                expected: m,
                actual,
            });
        }
    }
    for &(before, after) in spec.constraints() {
        if let Some(last_before) = last[before] {
            if first[after] < last_before {
                violations.push(Violation::Precedence { before, after });
            }
        }
    }
    ValidityReport { violations }
}

/// All valid flows of `spec`, in lexicographic order of pass indices.
pub fn enumerate_flows(spec: &FlowSpaceSpec) -> Result<EnumerateFlows<'_>> {
    enumerate_flows_with_limit(spec, DEFAULT_ENUMERATION_LIMIT)
}

pub fn enumerate_flows_with_limit(spec: &FlowSpaceSpec, limit: u64) -> Result<EnumerateFlows<'_>> {
    let total = count_flows_full(spec)?;
    if total > BigUint::from(limit) {
        return Err(Error::Capacity(format!(
            "{total} flows exceed the enumeration limit of {limit}"
        )));
    }
    let len = spec.flow_len();
    Ok(EnumerateFlows {
        spec,
        counts: vec![0; spec.pass_count()],
        prefix: Vec::with_capacity(len),
        cursor: vec![0; len + 1],
        done: false,
    })
}

/// Depth-first iterator behind [`enumerate_flows`].
pub struct EnumerateFlows<'a> {
    spec: &'a FlowSpaceSpec,
    counts: Vec<usize>,
    prefix: Vec<u16>,
    cursor: Vec<usize>,
    done: bool,
}

impl EnumerateFlows<'_> {
    fn pop(&mut self) -> bool {
        match self.prefix.pop() {
            Some(s) => {
                self.counts[usize::from(s)] -= 1;
                true
            }
            None => false,
        }
    }
}

impl Iterator for EnumerateFlows<'_> {
    type Item = Flow;

    fn next(&mut self) -> Option<Flow> {
        let len = self.spec.flow_len();
        let n = self.spec.pass_count();
        while !self.done {
            let depth = self.prefix.len();
            if depth == len {
                let flow = Flow::new(self.prefix.clone());
                if !self.pop() {
                    self.done = true;
                }
                return Some(flow);
            }
            let candidate =
                (self.cursor[depth]..n).find(|&pass| self.spec.may_append(&self.counts, pass));
            match candidate {
                Some(pass) => {
                    self.cursor[depth] = pass + 1;
                    self.cursor[depth + 1] = 0;
                    self.counts[pass] += 1;
                    self.prefix.push(pass as u16);
                }
                None => {
                    if !self.pop() {
                        self.done = true;
                    }
                }
            }
        }
        None
    }
}

/// Draws `count` pairwise-distinct valid flows, each a uniform shuffle of the
/// pass multiset, rejecting duplicates and constraint violations.
pub fn sample_flows(spec: &FlowSpaceSpec, count: usize, seed: u64) -> Result<Vec<Flow>> {
    sample_flows_with_cap(spec, count, seed, 1000)
}

/// As [`sample_flows`], giving up after `retry_factor * count` draws.
pub fn sample_flows_with_cap(
    spec: &FlowSpaceSpec,
    count: usize,
    seed: u64,
    retry_factor: u64,
) -> Result<Vec<Flow>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    match count_flows_full(spec) {
        Ok(total) if total < BigUint::from(count) => {
            return Err(Error::Argument(format!(
                "requested {count} distinct flows but the space holds only {total}"
            )));
        }
        // Uncountable spaces are sampled best-effort under the retry cap.
        Ok(_) | Err(Error::Capacity(_)) => {}
        Err(e) => return Err(e),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u16> = (0..spec.pass_count() as u16)
        .flat_map(|p| std::iter::repeat_n(p, spec.repetition()))
        .collect();
    let max_attempts = retry_factor.saturating_mul(count as u64).max(1);
    let mut seen = HashSet::with_capacity(count);
    let mut flows = Vec::with_capacity(count);
    let mut attempts = 0u64;
    while flows.len() < count {
        if attempts == max_attempts {
            return Err(Error::SamplingExhausted {
                requested: count,
                found: flows.len(),
                attempts,
            });
        }
        attempts += 1;
        pool.shuffle(&mut rng);
        let flow = Flow::new(pool.clone());
        if !spec.constraints().is_empty() && !validate_flow(spec, &flow).is_ok() {
            continue;
        }
        if seen.insert(flow.clone()) {
            flows.push(flow);
        }
    }
    Ok(flows)
}

/// Approximate `f64` view of a count, for logging.
pub fn approx(count: &BigUint) -> f64 {
    count.to_f64().unwrap_or(f64::INFINITY)
}

//! Empirical neural tangent kernels over restricted parameter subsets.
//!
//! For a scalar network output f(x), the kernel entry for two examples is
//! the dot product of their parameter gradients, summed over whichever
//! subset of parameters a plan marks trainable. One backward pass per
//! example produces the stacked gradient vectors; the Gram assembly uses
//! pairwise (tree) summation so oracle tolerances stay meaningful, and a
//! separate per-scalar Kahan-compensated route serves as the reference
//! implementation.

use crate::error::{Error, Result};
use crate::model::{ForwardAux, Model, PooledOutputContract};
use crate::numeric::{pairwise_dot, KahanSum};
use crate::peft::{MethodTag, TrainablePlan};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Guard for the exact per-scalar reference route.
const BRUTEFORCE_SCALAR_GUARD: usize = 100_000;

/// Which parameter subset produced a kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetTag {
    Full,
    Row(usize),
    Column(usize),
    Lora(usize),
    RandomEntry(f64),
    Custom(String),
}

impl SubsetTag {
    /// Short name usable in file names and report keys.
    pub fn label(&self) -> String {
        match self {
            SubsetTag::Full => "full".into(),
            SubsetTag::Row(r) => format!("row{r}"),
            SubsetTag::Column(r) => format!("column{r}"),
            SubsetTag::Lora(r) => format!("lora{r}"),
            SubsetTag::RandomEntry(p) => format!("random{p}"),
            SubsetTag::Custom(s) => s.clone(),
        }
    }

    /// Derive a tag from the plan that defines the subset.
    pub fn for_plan(plan: &TrainablePlan) -> SubsetTag {
        let max_axis_count = plan
            .schema()
            .entries()
            .iter()
            .map(|(n, s)| match plan.mask(n).expect("schema-complete plan") {
                crate::peft::Mask::Rows(r) => {
                    let _ = s;
                    r.len()
                }
                crate::peft::Mask::Cols(c) => c.len(),
                _ => 0,
            })
            .max()
            .unwrap_or(0);
        match plan.method {
            MethodTag::Full => SubsetTag::Full,
            MethodTag::RocoftRow => SubsetTag::Row(max_axis_count),
            MethodTag::RocoftColumn => SubsetTag::Column(max_axis_count),
            MethodTag::RocoftIndices => SubsetTag::Custom(format!("indices{max_axis_count}")),
            MethodTag::RandomEntry => SubsetTag::Custom("random-entry".into()),
            MethodTag::Lora => {
                SubsetTag::Lora(plan.adapters.first().map(|a| a.rank()).unwrap_or(0))
            }
            MethodTag::Bitfit => SubsetTag::Custom("bitfit".into()),
            MethodTag::Ia3 => SubsetTag::Custom("ia3".into()),
        }
    }
}

/// Symmetric Gram matrix of kernel values for a labeled example set.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub k: Tensor,
    pub subset: SubsetTag,
    pub example_ids: Vec<String>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.k.shape()[0]
    }

    /// Enforce the type invariants: symmetry within 1e-10 and positive
    /// semidefiniteness (min eigenvalue >= -1e-8 * trace / n).
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.k.shape() != [n, n] || self.example_ids.len() != n {
            return Err(Error::Contract(format!(
                "kernel shape {:?} with {} example ids",
                self.k.shape(),
                self.example_ids.len()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = (self.k.at2(i, j) - self.k.at2(j, i)).abs();
                if gap > 1e-10 {
                    return Err(Error::Contract(format!(
                        "kernel asymmetry {gap:.3e} at ({i}, {j})"
                    )));
                }
            }
        }
        let trace: f64 = (0..n).map(|i| self.k.at2(i, i)).sum();
        let eig = crate::eigen::eigen_spectrum(&self.k)?;
        let min = eig.last().copied().unwrap_or(0.0);
        if min < -1e-8 * trace / n as f64 {
            return Err(Error::Contract(format!(
                "kernel not positive semidefinite: min eigenvalue {min:.3e}, trace {trace:.3e}"
            )));
        }
        Ok(())
    }

    /// CSV dump with a header row of example ids.
    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "{}", self.example_ids.join(","))?;
        let n = self.n();
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{}", self.k.at2(i, j))).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Spectrum dump: `index,eigenvalue` rows.
pub fn write_spectrum_csv(out: &mut dyn Write, eigenvalues: &[f64]) -> Result<()> {
    writeln!(out, "index,eigenvalue")?;
    for (i, v) in eigenvalues.iter().enumerate() {
        writeln!(out, "{i},{v}")?;
    }
    Ok(())
}

/// Flat gradient of the scalar output with respect to the plan's trainable
/// scalars, in canonical order: schema-ordered masked entries (ascending
/// flat index), then adapter tensors (A before B), then IA3 vectors.
pub fn subset_gradient(
    model: &Model,
    plan: &TrainablePlan,
    example: &[u32],
    contract: &PooledOutputContract,
) -> Result<Vec<f64>> {
    let aux = ForwardAux { adapters: &plan.adapters, ia3: &plan.ia3 };
    let (tape, scalar) = model.trace_scalar_output(aux, example, contract)?;
    let grads = tape.backward(scalar)?;

    let mut out = Vec::new();
    for (name, shape) in plan.schema().entries() {
        let mask = plan.mask(name)?;
        let indices = mask.trainable_indices(shape);
        if indices.is_empty() {
            continue;
        }
        let node = tape
            .param_node(name)
            .ok_or_else(|| Error::UnknownName(format!("parameter `{name}` not on tape")))?;
        match grads.node(node) {
            Some(g) => out.extend(indices.iter().map(|&i| g.data()[i])),
            None => out.extend(std::iter::repeat(0.0).take(indices.len())),
        }
    }
    let mut adapter_keys: Vec<(String, usize)> = Vec::new();
    for a in &plan.adapters {
        adapter_keys.push((format!("{}.lora_a", a.target), a.a.numel()));
        adapter_keys.push((format!("{}.lora_b", a.target), a.b.numel()));
    }
    for s in &plan.ia3 {
        adapter_keys.push((format!("layer{}.ia3.l_k", s.layer), s.l_k.numel()));
        adapter_keys.push((format!("layer{}.ia3.l_v", s.layer), s.l_v.numel()));
        adapter_keys.push((format!("layer{}.ia3.l_ff", s.layer), s.l_ff.numel()));
    }
    for (key, numel) in adapter_keys {
        let node = tape
            .param_node(&key)
            .ok_or_else(|| Error::UnknownName(format!("adapter `{key}` not on tape")))?;
        match grads.node(node) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat(0.0).take(numel)),
        }
    }
    Ok(out)
}

/// Per-example gradient vectors for a whole example list.
pub fn gradient_features(
    model: &Model,
    plan: &TrainablePlan,
    examples: &[Vec<u32>],
    contract: &PooledOutputContract,
) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|ex| subset_gradient(model, plan, ex, contract))
        .collect()
}

/// Gram matrix of stacked feature vectors with pairwise-summed dot products;
/// the upper triangle is mirrored so the result is exactly symmetric.
pub fn gram_from_features(features: &[Vec<f64>]) -> Result<Tensor> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Contract("no examples for kernel".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Contract("ragged gradient features".into()));
    }
    let mut k = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let v = pairwise_dot(&features[a], &features[b]);
            k[a * n + b] = v;
            k[b * n + a] = v;
        }
    }
    Tensor::new(vec![n, n], k)
}

/// Rectangular kernel block between two feature lists (rows x columns).
pub fn kernel_block(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> Result<Tensor> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Contract("empty feature list for kernel block".into()));
    }
    let dim = cols[0].len();
    if rows.iter().chain(cols).any(|f| f.len() != dim) {
        return Err(Error::Contract("ragged gradient features".into()));
    }
    let mut k = vec![0.0; rows.len() * cols.len()];
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            k[i * cols.len() + j] = pairwise_dot(r, c);
        }
    }
    Tensor::new(vec![rows.len(), cols.len()], k)
}

fn default_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("ex{i:04}")).collect()
}

fn subset_size(plan: &TrainablePlan) -> usize {
    plan.total_mask_entries() + plan.adapter_params()
}

/// Empirical kernel of the plan's trainable subset at the model's current
/// weights: one backward pass per example, then a pairwise-summed Gram.
pub fn empirical_ntk(
    model: &Model,
    plan: &TrainablePlan,
    examples: &[Vec<u32>],
    contract: &PooledOutputContract,
) -> Result<KernelMatrix> {
    empirical_ntk_tagged(model, plan, examples, contract, SubsetTag::for_plan(plan), None)
}

/// [`empirical_ntk`] with an explicit tag and example ids.
pub fn empirical_ntk_tagged(
    model: &Model,
    plan: &TrainablePlan,
    examples: &[Vec<u32>],
    contract: &PooledOutputContract,
    tag: SubsetTag,
    example_ids: Option<Vec<String>>,
) -> Result<KernelMatrix> {
    if examples.is_empty() {
        return Err(Error::Contract("empty example list".into()));
    }
    if subset_size(plan) == 0 {
        return Err(Error::Contract("empty parameter subset".into()));
    }
    let features = gradient_features(model, plan, examples, contract)?;
    let k = gram_from_features(&features)?;
    let ids = example_ids.unwrap_or_else(|| default_ids(examples.len()));
    Ok(KernelMatrix { k, subset: tag, example_ids: ids })
}

/// Reference kernel: explicit per-scalar gradient products accumulated in
/// scalar-major order with Kahan compensation. Exact but quadratic in the
/// subset size, so a guard caps it at 1e5 scalars.
pub fn ntk_bruteforce(
    model: &Model,
    plan: &TrainablePlan,
    examples: &[Vec<u32>],
    contract: &PooledOutputContract,
) -> Result<KernelMatrix> {
    if examples.is_empty() {
        return Err(Error::Contract("empty example list".into()));
    }
    let size = subset_size(plan);
    if size == 0 {
        return Err(Error::Contract("empty parameter subset".into()));
    }
    if size > BRUTEFORCE_SCALAR_GUARD {
        return Err(Error::Resource(format!(
            "subset has {size} scalars, reference route caps at {BRUTEFORCE_SCALAR_GUARD}"
        )));
    }
    let features = gradient_features(model, plan, examples, contract)?;
    let n = examples.len();
    let dim = features[0].len();
    let mut sums = vec![KahanSum::new(); n * n];
    for i in 0..dim {
        for a in 0..n {
            let ga = features[a][i];
            for b in a..n {
                sums[a * n + b].add(ga * features[b][i]);
            }
        }
    }
    let mut k = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let v = sums[a * n + b].value();
            k[a * n + b] = v;
            k[b * n + a] = v;
        }
    }
    Ok(KernelMatrix {
        k: Tensor::new(vec![n, n], k)?,
        subset: SubsetTag::for_plan(plan),
        example_ids: default_ids(n),
    })
}

/// Entrywise norm order for kernel comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormOrder {
    One,
    Two,
}

impl NormOrder {
    pub fn label(&self) -> &'static str {
        match self {
            NormOrder::One => "1",
            NormOrder::Two => "2",
        }
    }

    fn of(&self, t: &Tensor) -> f64 {
        match self {
            NormOrder::One => t.norm_l1(),
            NormOrder::Two => t.norm_l2(),
        }
    }
}

/// Normalized kernel distance: each matrix is flattened and divided by its
/// entrywise p-norm, then the p-norm of the difference is taken. Symmetric
/// and invariant to positive rescaling of either argument.
pub fn relative_difference(a: &KernelMatrix, b: &KernelMatrix, p: NormOrder) -> Result<f64> {
    if a.k.shape() != b.k.shape() {
        return Err(Error::ShapeMismatch {
            left: a.k.shape().to_vec(),
            right: b.k.shape().to_vec(),
            op: "relative_difference",
        });
    }
    let na = p.of(&a.k);
    let nb = p.of(&b.k);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm kernel in relative_difference".into()));
    }
    let diff = a.k.scale(1.0 / na).add(&b.k.scale(-1.0 / nb))?;
    Ok(p.of(&diff))
}

/// Identifier of one trainable scalar inside a named tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamScalarId {
    pub tensor: String,
    pub flat_index: usize,
}

/// Scalar ids covering every adapter entry of a LoRA plan, in the same
/// canonical order the kernel machinery uses.
pub fn lora_subset(plan: &TrainablePlan) -> Result<Vec<ParamScalarId>> {
    if plan.adapters.is_empty() {
        return Err(Error::Contract("plan has no low-rank adapters".into()));
    }
    let mut out = Vec::new();
    for a in &plan.adapters {
        for i in 0..a.a.numel() {
            out.push(ParamScalarId { tensor: format!("{}.lora_a", a.target), flat_index: i });
        }
        for i in 0..a.b.numel() {
            out.push(ParamScalarId { tensor: format!("{}.lora_b", a.target), flat_index: i });
        }
    }
    Ok(out)
}

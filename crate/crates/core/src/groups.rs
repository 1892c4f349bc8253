//! Discrete planar symmetry groups (C4, C8, D4 and the trivial group) and
//! their actions on kernels, feature maps and group-indexed channels.
//!
//! An element is a pair `(r, flip)` meaning "rotate counter-clockwise by
//! `r·360°/n`, then reflect left-right if `flip`". On a square grid of side
//! `n` a quarter turn sends index `(i, j)` to `(n-1-j, i)` and the reflection
//! sends `(i, j)` to `(i, n-1-j)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    #[serde(rename = "vanilla")]
    Trivial,
    #[serde(rename = "c4")]
    C4,
    #[serde(rename = "c8")]
    C8,
    #[serde(rename = "d4")]
    D4,
}

impl GroupKind {
    pub const ALL: [GroupKind; 4] = [GroupKind::Trivial, GroupKind::C4, GroupKind::C8, GroupKind::D4];

    /// Number of rotations in the group.
    pub fn rotations(self) -> u8 {
        match self {
            GroupKind::Trivial => 1,
            GroupKind::C4 | GroupKind::D4 => 4,
            GroupKind::C8 => 8,
        }
    }

    pub fn has_flips(self) -> bool {
        self == GroupKind::D4
    }

    pub fn order(self) -> usize {
        usize::from(self.rotations()) * if self.has_flips() { 2 } else { 1 }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Trivial => "vanilla",
            GroupKind::C4 => "c4",
            GroupKind::C8 => "c8",
            GroupKind::D4 => "d4",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(GroupKind::Trivial),
            "c4" => Ok(GroupKind::C4),
            "c8" => Ok(GroupKind::C8),
            "d4" => Ok(GroupKind::D4),
            other => Err(Error::InvalidArgument(format!("unknown group kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement {
    kind: GroupKind,
    rotation: u8,
    flip: bool,
}

impl GroupElement {
    pub fn new(kind: GroupKind, rotation: u8, flip: bool) -> Result<Self> {
        if rotation >= kind.rotations() || (flip && !kind.has_flips()) {
            return Err(Error::InvalidArgument(format!(
                "({rotation}, flip={flip}) is not an element of {kind}"
            )));
        }
        Ok(GroupElement { kind, rotation, flip })
    }

    pub fn identity(kind: GroupKind) -> Self {
        GroupElement {
            kind,
            rotation: 0,
            flip: false,
        }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn rotation(&self) -> u8 {
        self.rotation
    }

    pub fn flip(&self) -> bool {
        self.flip
    }

    pub fn angle_degrees(&self) -> f64 {
        f64::from(self.rotation) * 360.0 / f64::from(self.kind.rotations())
    }

    /// Number of quarter turns, when the rotation is a multiple of 90°.
    pub fn quarter_turns(&self) -> Option<u8> {
        let n = self.kind.rotations();
        (self.rotation * 4 % n == 0).then(|| self.rotation * 4 / n)
    }

    /// Whether the element maps the integer grid onto itself.
    pub fn is_exact_grid(&self) -> bool {
        self.quarter_turns().is_some()
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0 && !self.flip
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement> {
        if self.kind != other.kind {
            return Err(Error::GroupMismatch(self.kind.to_string(), other.kind.to_string()));
        }
        let n = self.kind.rotations();
        // F·R^r = R^-r·F, so (F^a R^r)(F^b R^s) = F^(a+b) R^(s ± r).
        let rotation = if other.flip {
            (other.rotation + n - self.rotation) % n
        } else {
            (self.rotation + other.rotation) % n
        };
        Ok(GroupElement {
            kind: self.kind,
            rotation,
            flip: self.flip ^ other.flip,
        })
    }

    pub fn inverse(&self) -> GroupElement {
        if self.flip {
            // reflections are involutions
            *self
        } else {
            let n = self.kind.rotations();
            GroupElement {
                rotation: (n - self.rotation) % n,
                ..*self
            }
        }
    }

    /// Image of grid index `(i, j)` on an `n×n` grid. Exact-grid elements only.
    fn map_index(&self, i: usize, j: usize, n: usize) -> (usize, usize) {
        let q = self.quarter_turns().expect("exact-grid element");
        let (mut a, mut b) = (i, j);
        for _ in 0..q {
            (a, b) = (n - 1 - b, a);
        }
        if self.flip {
            b = n - 1 - b;
        }
        (a, b)
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let angle = self.angle_degrees();
        if self.flip {
            write!(f, "{}:r{}+flip", self.kind, angle)
        } else {
            write!(f, "{}:r{}", self.kind, angle)
        }
    }
}

/// A group with its elements in canonical order: rotations ascending, then
/// flipped rotations ascending. The identity is first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetryGroup {
    kind: GroupKind,
    elements: Vec<GroupElement>,
}

impl SymmetryGroup {
    pub fn new(kind: GroupKind) -> Self {
        let flips: &[bool] = if kind.has_flips() { &[false, true] } else { &[false] };
        let elements = flips
            .iter()
            .flat_map(|&flip| (0..kind.rotations()).map(move |rotation| GroupElement { kind, rotation, flip }))
            .collect();
        SymmetryGroup { kind, elements }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn identity(&self) -> GroupElement {
        self.elements[0]
    }

    pub fn element(&self, index: usize) -> GroupElement {
        self.elements[index]
    }

    pub fn index_of(&self, g: &GroupElement) -> Result<usize> {
        if g.kind != self.kind {
            return Err(Error::GroupMismatch(self.kind.to_string(), g.kind.to_string()));
        }
        let flip_offset = if g.flip { usize::from(self.kind.rotations()) } else { 0 };
        Ok(flip_offset + usize::from(g.rotation))
    }

    pub fn compose(&self, g: &GroupElement, h: &GroupElement) -> Result<GroupElement> {
        self.index_of(g)?;
        g.compose(h)
    }

    /// Regular-representation permutation `π_g` with
    /// `π_g[index(h)] = index(g ∘ h)`.
    pub fn regular_rep_perm(&self, g: &GroupElement) -> Result<Vec<usize>> {
        self.elements
            .iter()
            .map(|h| self.index_of(&g.compose(h)?))
            .collect()
    }

    /// Table `t[a][b] = index(element(a)⁻¹ ∘ element(b))`.
    pub fn relative_index_table(&self) -> Vec<Vec<usize>> {
        self.elements
            .iter()
            .map(|g| {
                let gi = g.inverse();
                self.elements
                    .iter()
                    .map(|h| self.index_of(&gi.compose(h).expect("same group")).expect("member"))
                    .collect()
            })
            .collect()
    }
}

/// Sparse linear map on a `k×k` kernel: for every output cell, the source
/// cells and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMap {
    size: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl KernelMap {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[Vec<(usize, f64)>] {
        &self.taps
    }

    /// True when every output cell copies exactly one input cell.
    pub fn is_permutation(&self) -> bool {
        self.taps.iter().all(|t| t.len() == 1 && t[0].1 == 1.0)
    }

    pub fn apply<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        for (d, taps) in dst.iter_mut().zip(&self.taps) {
            *d = taps.iter().fold(T::zero(), |acc, &(s, w)| acc + T::from_f64(w) * src[s]);
        }
    }

    pub fn apply_transpose_add<T: Scalar>(&self, dst_grad: &[T], src_grad: &mut [T]) {
        for (g, taps) in dst_grad.iter().zip(&self.taps) {
            for &(s, w) in taps {
                src_grad[s] += T::from_f64(w) * *g;
            }
        }
    }
}

/// The linear action of `g` on `k×k` kernels. Exact-grid elements permute
/// cells; other rotations resample bilinearly about the centre cell with
/// zeros outside the support.
pub fn kernel_map(g: &GroupElement, k: usize) -> Result<KernelMap> {
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
    }
    let mut taps = vec![Vec::new(); k * k];
    if g.is_exact_grid() {
        for i in 0..k {
            for j in 0..k {
                let (a, b) = g.map_index(i, j, k);
                taps[a * k + b] = vec![(i * k + j, 1.0)];
            }
        }
    } else {
        let c = (k as f64 - 1.0) / 2.0;
        let (sin, cos) = g.angle_degrees().to_radians().sin_cos();
        for i in 0..k {
            for j in 0..k {
                // undo the flip, then the rotation
                let jj = if g.flip { k - 1 - j } else { j };
                let (y, x) = (i as f64 - c, jj as f64 - c);
                let sy = y * cos + x * sin + c;
                let sx = -y * sin + x * cos + c;
                taps[i * k + j] = bilinear_taps(sy, sx, k, k);
            }
        }
    }
    Ok(KernelMap { size: k, taps })
}

/// Bilinear interpolation taps at continuous position `(y, x)` on an `h×w`
/// grid; out-of-grid neighbours contribute zero.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            let wgt = wy * wx;
            if wgt.abs() < 1e-12 || yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                continue;
            }
            taps.push((yy as usize * w + xx as usize, wgt));
        }
    }
    taps
}

/// Transform a single `k×k` kernel by `g`.
pub fn act_on_kernel<T: Scalar>(g: &GroupElement, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match *kernel.shape() {
        [a, b] if a == b => a,
        ref s => return Err(Error::shape("act_on_kernel", format!("expected a square kernel, got {s:?}"))),
    };
    let map = kernel_map(g, k)?;
    let mut out = Tensor::zeros([k, k]);
    map.apply(kernel.data(), out.data_mut());
    Ok(out)
}

/// Apply an exact-grid element to the two trailing (square) axes of `x`.
pub fn act_on_feature_map<T: Scalar>(g: &GroupElement, x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::shape("act_on_feature_map", format!("trailing axes must be square, got {s:?}")));
    }
    if !g.is_exact_grid() {
        return Err(Error::UnsupportedAction { element: g.to_string() });
    }
    let n = s[s.len() - 1];
    let plane = n * n;
    let mut out = Tensor::zeros(s.to_vec());
    let src = x.data();
    let dst = out.data_mut();
    let index: Vec<usize> = (0..plane)
        .map(|p| {
            let (a, b) = g.map_index(p / n, p % n, n);
            a * n + b
        })
        .collect();
    for (sp, dp) in src.chunks_exact(plane).zip(dst.chunks_exact_mut(plane)) {
        for (p, &q) in index.iter().enumerate() {
            dp[q] = sp[p];
        }
    }
    Ok(out)
}

/// Permute axis 2 of a `[B, C, G, ...]` tensor: slot `h` moves to `perm[h]`.
pub fn permute_group_axis<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 3 || s[2] != perm.len() {
        return Err(Error::shape("permute_group_axis", format!("{s:?} vs permutation of {}", perm.len())));
    }
    let g = s[2];
    let inner: usize = s[3..].iter().product();
    let mut out = Tensor::zeros(s.to_vec());
    for (sblock, dblock) in x.data().chunks_exact(g * inner).zip(out.data_mut().chunks_exact_mut(g * inner)) {
        for (h, &to) in perm.iter().enumerate() {
            dblock[to * inner..(to + 1) * inner].copy_from_slice(&sblock[h * inner..(h + 1) * inner]);
        }
    }
    Ok(out)
}

/// The full regular-representation action on a group feature map
/// `[B, C, |G|, H, W]`: spatial transform plus group-axis permutation.
pub fn act_on_group_feature_map<T: Scalar>(
    group: &SymmetryGroup,
    g: &GroupElement,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let perm = group.regular_rep_perm(g)?;
    permute_group_axis(&act_on_feature_map(g, x)?, &perm)
}

/// Rotate the trailing square axes of `x` by an arbitrary angle about the
/// grid centre with bilinear resampling and zero fill. Used to probe the
/// approximate equivariance of 45° elements.
pub fn rotate_resample<T: Scalar>(x: &Tensor<T>, degrees: f64) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::shape("rotate_resample", format!("trailing axes must be square, got {s:?}")));
    }
    let n = s[s.len() - 1];
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let taps: Vec<Vec<(usize, f64)>> = (0..n * n)
        .map(|p| {
            let (y, x) = ((p / n) as f64 - c, (p % n) as f64 - c);
            bilinear_taps(y * cos + x * sin + c, -y * sin + x * cos + c, n, n)
        })
        .collect();
    let map = KernelMap { size: n, taps };
    let mut out = Tensor::zeros(s.to_vec());
    for (sp, dp) in x.data().chunks_exact(n * n).zip(out.data_mut().chunks_exact_mut(n * n)) {
        map.apply(sp, dp);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn el(kind: GroupKind, r: u8, f: bool) -> GroupElement {
        GroupElement::new(kind, r, f).unwrap()
    }

    #[test]
    fn quarter_turns_compose() {
        let r90 = el(GroupKind::C4, 1, false);
        assert_eq!(r90.compose(&r90).unwrap(), el(GroupKind::C4, 2, false));
        let f = el(GroupKind::D4, 0, true);
        assert!(f.compose(&f).unwrap().is_identity());
    }

    #[test]
    fn inverse_of_r90_is_r270() {
        let r90 = el(GroupKind::C4, 1, false);
        assert_eq!(r90.inverse(), el(GroupKind::C4, 3, false));
        assert!(GroupElement::identity(GroupKind::D4).inverse().is_identity());
    }

    #[test]
    fn cross_group_composition_rejected() {
        let a = el(GroupKind::C4, 1, false);
        let b = el(GroupKind::C8, 1, false);
        assert!(matches!(a.compose(&b), Err(Error::GroupMismatch(..))));
    }

    #[test]
    fn invalid_elements_rejected() {
        assert!(GroupElement::new(GroupKind::C4, 4, false).is_err());
        assert!(GroupElement::new(GroupKind::C8, 1, true).is_err());
    }

    #[test]
    fn r90_moves_top_left_to_bottom_left() {
        let mut k = Tensor::<f64>::zeros([3, 3]);
        k.data_mut()[0] = 1.0;
        let out = act_on_kernel(&el(GroupKind::C4, 1, false), &k).unwrap();
        assert_eq!(out.at(&[2, 0]), 1.0);
        assert_eq!(out.sum(), 1.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let k = Tensor::<f64>::zeros([4, 4]);
        assert!(act_on_kernel(&el(GroupKind::C4, 1, false), &k).is_err());
    }

    #[test]
    fn c4_regular_rep_of_r90_is_a_cycle() {
        let g = SymmetryGroup::new(GroupKind::C4);
        assert_eq!(g.regular_rep_perm(&g.element(1)).unwrap(), vec![1, 2, 3, 0]);
        assert_eq!(g.regular_rep_perm(&g.identity()).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn forty_five_degree_feature_map_action_rejected() {
        let x = Tensor::<f32>::zeros([4, 4]);
        let r45 = el(GroupKind::C8, 1, false);
        assert!(matches!(act_on_feature_map(&r45, &x), Err(Error::UnsupportedAction { .. })));
        // the 90° element of C8 acts exactly
        assert!(act_on_feature_map(&el(GroupKind::C8, 2, false), &x).is_ok());
    }

    #[test]
    fn canonical_order_puts_flips_last() {
        let g = SymmetryGroup::new(GroupKind::D4);
        let flags: Vec<bool> = g.elements().iter().map(|e| e.flip()).collect();
        assert_eq!(flags, [false, false, false, false, true, true, true, true]);
        assert!(g.identity().is_identity());
    }
}

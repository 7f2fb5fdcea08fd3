//! Scan routes: bijections between an `H×W` grid and a length-`H·W`
//! sequence, plus the merge of per-route outputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKind {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl RouteKind {
    pub const ALL: [RouteKind; 4] = [
        RouteKind::RowForward,
        RouteKind::RowBackward,
        RouteKind::ColForward,
        RouteKind::ColBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RouteKind::RowForward => "row_forward",
            RouteKind::RowBackward => "row_backward",
            RouteKind::ColForward => "col_forward",
            RouteKind::ColBackward => "col_backward",
        }
    }
}

impl fmt::Display for RouteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouteKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown route kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanRoute {
    kind: RouteKind,
    height: usize,
    width: usize,
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl ScanRoute {
    pub fn kind(&self) -> RouteKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `perm[s]` is the flat grid index visited at step `s`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }
}

pub fn build_route(kind: RouteKind, height: usize, width: usize) -> Result<ScanRoute> {
    if height == 0 || width == 0 {
        return Err(Error::shape(
            "build_route",
            format!("grid extents must be positive, got {height}×{width}"),
        ));
    }
    let len = height * width;
    let col_major = |s: usize| (s % height) * width + s / height;
    let perm: Vec<usize> = match kind {
        RouteKind::RowForward => (0..len).collect(),
        RouteKind::RowBackward => (0..len).rev().collect(),
        RouteKind::ColForward => (0..len).map(col_major).collect(),
        RouteKind::ColBackward => (0..len).rev().map(col_major).collect(),
    };
    let mut inv = vec![0; len];
    for (s, &p) in perm.iter().enumerate() {
        inv[p] = s;
    }
    Ok(ScanRoute {
        kind,
        height,
        width,
        perm,
        inv,
    })
}

fn grid_dims(x: &Tensor, route: &ScanRoute, op: &'static str) -> Result<usize> {
    match x.shape() {
        &[h, w, d] if h == route.height && w == route.width => Ok(d),
        s => Err(Error::shape(
            op,
            format!("{s:?} against a {}×{} route", route.height, route.width),
        )),
    }
}

/// Flattens `x[H×W×D]` into the route's visiting order, `[L×D]`.
pub fn apply_route(x: &Tensor, route: &ScanRoute) -> Result<Tensor> {
    let d = grid_dims(x, route, "apply_route")?;
    let flat = x.reshape(&[route.len(), d])?;
    flat.gather_rows(&route.perm)
}

/// Scatters a route-ordered sequence `[L×D]` back onto the grid.
pub fn invert_route(seq: &Tensor, route: &ScanRoute) -> Result<Tensor> {
    match seq.shape() {
        &[l, d] if l == route.len() => {
            let grid = seq.gather_rows(&route.inv)?;
            grid.reshape(&[route.height, route.width, d])
        }
        s => Err(Error::shape(
            "invert_route",
            format!("{s:?} against route of length {}", route.len()),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    #[default]
    Mean,
    Sum,
}

impl FromStr for MergeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(MergeRule::Mean),
            "sum" => Ok(MergeRule::Sum),
            other => Err(Error::Config(format!("unknown merge rule `{other}`"))),
        }
    }
}

/// An ordered set of routes over one grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteSet {
    routes: Vec<ScanRoute>,
    merge: MergeRule,
}

impl RouteSet {
    pub fn new(kinds: &[RouteKind], height: usize, width: usize, merge: MergeRule) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("a route set needs at least one route".into()));
        }
        let routes = kinds
            .iter()
            .map(|&k| build_route(k, height, width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { routes, merge })
    }

    /// Forward and backward row scans.
    pub fn bidirectional(height: usize, width: usize) -> Result<Self> {
        Self::new(
            &[RouteKind::RowForward, RouteKind::RowBackward],
            height,
            width,
            MergeRule::Mean,
        )
    }

    pub fn four_way(height: usize, width: usize) -> Result<Self> {
        Self::new(&RouteKind::ALL, height, width, MergeRule::Mean)
    }

    pub fn routes(&self) -> &[ScanRoute] {
        &self.routes
    }

    pub fn merge_rule(&self) -> MergeRule {
        self.merge
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }
}

/// Elementwise mean or sum of per-route 2D outputs, accumulated in route order.
pub fn merge_routes(outputs: &[Tensor], rule: MergeRule) -> Result<Tensor> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::Contract("merge_routes needs at least one output".into()))?;
    let mut acc = first.clone();
    for o in &outputs[1..] {
        if o.shape() != acc.shape() {
            return Err(Error::shape(
                "merge_routes",
                format!("{:?} vs {:?}", o.shape(), acc.shape()),
            ));
        }
        for (a, v) in acc.data_mut().iter_mut().zip(o.data()) {
            *a += v;
        }
    }
    if rule == MergeRule::Mean && outputs.len() > 1 {
        let inv = 1.0 / outputs.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    acc.checked("merge_routes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(&[h, w, d], |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn visiting_orders_on_2x2() {
        // [[a, b], [c, d]] with a=0, b=1, c=2, d=3
        let order = |k| build_route(k, 2, 2).unwrap().perm().to_vec();
        assert_eq!(order(RouteKind::RowForward), vec![0, 1, 2, 3]);
        assert_eq!(order(RouteKind::RowBackward), vec![3, 2, 1, 0]);
        assert_eq!(order(RouteKind::ColForward), vec![0, 2, 1, 3]);
        assert_eq!(order(RouteKind::ColBackward), vec![3, 1, 2, 0]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(build_route(RouteKind::RowForward, 0, 3).is_err());
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in RouteKind::ALL {
            assert_eq!(k.name().parse::<RouteKind>().unwrap(), k);
        }
        assert!("zigzag".parse::<RouteKind>().is_err());
    }

    #[test]
    fn gather_matches_nested_loops() {
        let x = grid(3, 2, 2, 1);
        let r = build_route(RouteKind::RowForward, 3, 2).unwrap();
        let seq = apply_route(&x, &r).unwrap();
        let mut s = 0;
        for i in 0..3 {
            for j in 0..2 {
                for c in 0..2 {
                    assert_eq!(seq.at(&[s, c]), x.at(&[i, j, c]));
                }
                s += 1;
            }
        }
        let r = build_route(RouteKind::ColForward, 3, 2).unwrap();
        let seq = apply_route(&x, &r).unwrap();
        let mut s = 0;
        for j in 0..2 {
            for i in 0..3 {
                assert_eq!(seq.at(&[s, 1]), x.at(&[i, j, 1]));
                s += 1;
            }
        }
    }

    #[test]
    fn constant_grid_gives_constant_sequence() {
        let x = Tensor::full(&[3, 4, 2], 1.5);
        for k in RouteKind::ALL {
            let r = build_route(k, 3, 4).unwrap();
            assert!(apply_route(&x, &r).unwrap().data().iter().all(|&v| v == 1.5));
        }
    }

    #[test]
    fn roundtrip_all_kinds_and_extents() {
        for h in 1..=9 {
            for w in 1..=9 {
                let x = grid(h, w, 2, (h * 10 + w) as u64);
                for k in RouteKind::ALL {
                    let r = build_route(k, h, w).unwrap();
                    for s in 0..r.len() {
                        assert_eq!(r.inv()[r.perm()[s]], s);
                    }
                    let back = invert_route(&apply_route(&x, &r).unwrap(), &r).unwrap();
                    assert_eq!(back, x);
                }
            }
        }
    }

    #[test]
    fn extent_mismatch() {
        let r = build_route(RouteKind::RowForward, 2, 3).unwrap();
        assert!(apply_route(&grid(3, 2, 1, 0), &r).is_err());
        assert!(invert_route(&Tensor::zeros(&[5, 1]), &r).is_err());
    }

    #[test]
    fn merge_cases() {
        let a = grid(2, 2, 3, 4);
        assert_eq!(merge_routes(&[a.clone()], MergeRule::Mean).unwrap(), a);
        assert_eq!(
            merge_routes(&[a.clone(), a.clone()], MergeRule::Mean).unwrap(),
            a
        );
        let s = merge_routes(
            &[Tensor::ones(&[2, 2, 1]), Tensor::full(&[2, 2, 1], 2.0)],
            MergeRule::Sum,
        )
        .unwrap();
        assert!(s.data().iter().all(|&v| v == 3.0));
        assert!(merge_routes(&[], MergeRule::Mean).is_err());
        assert!(merge_routes(&[a, Tensor::ones(&[1])], MergeRule::Sum).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_random(h in 1usize..12, w in 1usize..12, d in 1usize..4, seed in any::<u64>(), k in 0usize..4) {
            let x = grid(h, w, d, seed);
            let r = build_route(RouteKind::ALL[k], h, w).unwrap();
            let back = invert_route(&apply_route(&x, &r).unwrap(), &r).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}

use super::*;
use crate::adaptor_s::multi_scale_aggregate;
use crate::adaptor_t::{retain, SelectionMode};
use crate::grad::checks::weighted_sum;
use crate::grad::{ParamGroup, Tape};
use crate::rng::SplitMix64;
use crate::routes::{apply_route, build_route, invert_route, merge_routes, RouteKind};
use crate::ssm::solve_decoupled;
use crate::tensor::{self, Tensor, Unary};

fn grid(h: usize, w: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(&[h, w, d], |_| rng.uniform(-1.0, 1.0))
}

fn randomize_adaptors(block: &mut Block, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for id in block.store.ids().collect::<Vec<_>>() {
        let p = block.store.get_mut(id);
        if p.group.is_adaptor() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
    }
}

/// SS2D recomposed from the standalone operations.
fn ss2d_oracle(x: &Tensor, block: &Block) -> Tensor {
    let cfg = &block.config;
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let ssm = block.ssm().unwrap();
    let tparams = block.adaptor_t_params();
    let bank = block.kernel_bank();
    let outs: Vec<Tensor> = cfg
        .routes
        .iter()
        .enumerate()
        .map(|(r, &k)| {
            let route = build_route(k, h, w).unwrap();
            let u = apply_route(x, &route).unwrap();
            let hook = |hs: &Tensor| retain(hs, tparams.as_ref().unwrap(), r);
            let hidden: Option<crate::ssm::Hook<'_>> = tparams.as_ref().map(|_| &hook as _);
            let y = solve_decoupled(&u, &ssm, cfg.discretization, hidden, None).unwrap();
            let y2 = invert_route(&y, &route).unwrap();
            match &bank {
                Some(b) => multi_scale_aggregate(&y2, b).unwrap(),
                None => y2,
            }
        })
        .collect();
    merge_routes(&outs, cfg.merge).unwrap()
}

fn block_oracle(x: &Tensor, block: &Block) -> Tensor {
    let (s, ids) = (&block.store, &block.ids);
    let eps = block.config.norm_eps;
    let xn = tensor::layer_norm(x, s.value(ids.ln1_g), s.value(ids.ln1_b), eps).unwrap();
    let y = tensor::add(x, &ss2d_oracle(&xn, block)).unwrap();
    let yn = tensor::layer_norm(&y, s.value(ids.ln2_g), s.value(ids.ln2_b), eps).unwrap();
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let rows = yn.reshape(&[h * w, d]).unwrap();
    let hid = tensor::linear(&rows, s.value(ids.w1), Some(s.value(ids.b1))).unwrap();
    let act = tensor::unary(&hid, Unary::Gelu).unwrap();
    let f = tensor::linear(&act, s.value(ids.w2), Some(s.value(ids.b2))).unwrap();
    tensor::add(&y, &f.reshape(&[h, w, d]).unwrap()).unwrap()
}

#[test]
fn pure_skip_path_is_identity() {
    let cfg = BlockConfig {
        dim: 3,
        routes: vec![RouteKind::RowForward],
        ..BlockConfig::default()
    };
    let mut b = Block::new(cfg, &mut SplitMix64::new(1)).unwrap();
    b.store.get_mut(b.ids.c_proj).value = Tensor::zeros(&[4, 3]);
    b.store.get_mut(b.ids.d_skip).value = Tensor::ones(&[3]);
    let x = grid(3, 4, 3, 2);
    assert_eq!(ss2d_forward(&x, &b).unwrap(), x);
}

#[test]
fn opposite_routes_keep_point_symmetry() {
    let b = Block::new(BlockConfig { dim: 2, ..BlockConfig::default() }, &mut SplitMix64::new(4)).unwrap();
    for (h, w) in [(2, 2), (3, 4)] {
        let base = grid(h, w, 2, 9);
        // symmetric under 180° rotation
        let x = Tensor::from_fn(&[h, w, 2], |i| {
            let (c, cell) = (i % 2, i / 2);
            let (r, q) = (cell / w, cell % w);
            base.at(&[r, q, c]) + base.at(&[h - 1 - r, w - 1 - q, c])
        });
        let y = ss2d_forward(&x, &b).unwrap();
        for r in 0..h {
            for q in 0..w {
                for c in 0..2 {
                    let diff = y.at(&[r, q, c]) - y.at(&[h - 1 - r, w - 1 - q, c]);
                    assert!(diff.abs() < 1e-14, "{diff}");
                }
            }
        }
    }
}

#[test]
fn residual_only_block_is_identity() {
    let mut b = Block::new(BlockConfig::default(), &mut SplitMix64::new(3)).unwrap();
    for id in [b.ids.c_proj, b.ids.d_skip, b.ids.w2, b.ids.b2] {
        let p = b.store.get_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
    let x = grid(4, 4, 8, 5);
    assert_eq!(block_forward(&x, &b).unwrap(), x);
}

#[test]
fn zero_ffn_leaves_attention_path() {
    let mut b = Block::new(BlockConfig::default(), &mut SplitMix64::new(6)).unwrap();
    let w2 = b.ids.w2;
    b.store.get_mut(w2).value = Tensor::zeros(&[8, 32]);
    let x = grid(3, 3, 8, 7);
    let s = b.store.clone();
    let xn = tensor::layer_norm(&x, s.value(b.ids.ln1_g), s.value(b.ids.ln1_b), 1e-5).unwrap();
    let expect = tensor::add(&x, &ss2d_forward(&xn, &b).unwrap()).unwrap();
    assert_eq!(block_forward(&x, &b).unwrap(), expect);
}

#[test]
fn block_matches_composed_oracle() {
    for (seed, mode, sharing) in [
        (1, SelectionMode::Learnable, false),
        (2, SelectionMode::Static, false),
        (3, SelectionMode::Learnable, true),
    ] {
        let mut cfg = BlockConfig::with_adaptors(4, Insertion::Sequential);
        cfg.routes = RouteKind::ALL.to_vec();
        let t = cfg.adaptor_t.as_mut().unwrap();
        t.mode = mode;
        t.weight_sharing = sharing;
        let mut b = Block::new(cfg, &mut SplitMix64::new(seed)).unwrap();
        randomize_adaptors(&mut b, seed + 10);
        let x = grid(4, 3, 4, seed + 20);
        let got = block_forward(&x, &b).unwrap();
        let dev = got.max_abs_diff(&block_oracle(&x, &b));
        assert!(dev <= 1e-12, "seed {seed}: {dev}");
    }
    let b = Block::new(BlockConfig::default(), &mut SplitMix64::new(8)).unwrap();
    let x = grid(2, 5, 8, 3);
    assert!(block_forward(&x, &b).unwrap().max_abs_diff(&block_oracle(&x, &b)) <= 1e-12);
}

fn adaptor_free_twin(b: &Block) -> Block {
    let cfg = BlockConfig {
        adaptor_t: None,
        adaptor_s: None,
        insertion: Insertion::None,
        ..b.config.clone()
    };
    let mut plain = Block::new(cfg, &mut SplitMix64::new(0)).unwrap();
    plain.store.load_matching(&b.store).unwrap();
    plain
}

#[test]
fn parallel_zero_init_reproduces_base() {
    for seed in 0..10 {
        let b = Block::new(BlockConfig::with_adaptors(8, Insertion::Parallel), &mut SplitMix64::new(seed)).unwrap();
        let plain = adaptor_free_twin(&b);
        let x = grid(4, 4, 8, seed + 100);
        let dev = block_forward(&x, &b).unwrap().max_abs_diff(&block_forward(&x, &plain).unwrap());
        assert!(dev <= 1e-12, "{dev}");
    }
}

#[test]
fn sequential_identity_hooks_reproduce_base() {
    // a residual bank with zero kernels is an identity output hook
    let cfg = BlockConfig {
        adaptor_s: Some(AdaptorSSpec::default()),
        insertion: Insertion::Sequential,
        ..BlockConfig::default()
    };
    let b = Block::new(cfg, &mut SplitMix64::new(2)).unwrap();
    let plain = adaptor_free_twin(&b);
    let x = grid(4, 4, 8, 1);
    assert_eq!(block_forward(&x, &b).unwrap(), block_forward(&x, &plain).unwrap());
}

#[test]
fn sequential_and_parallel_differ() {
    let mut seq = Block::new(BlockConfig::with_adaptors(8, Insertion::Sequential), &mut SplitMix64::new(5)).unwrap();
    randomize_adaptors(&mut seq, 6);
    let mut par = seq.clone();
    par.config = insert_adaptor(&seq.config, Insertion::Parallel).unwrap();
    let x = grid(4, 4, 8, 7);
    let dev = block_forward(&x, &seq).unwrap().max_abs_diff(&block_forward(&x, &par).unwrap());
    assert!(dev > 1e-6);
}

#[test]
fn config_contracts() {
    let mut cfg = BlockConfig::with_adaptors(8, Insertion::None);
    assert!(cfg.validate().is_err());
    cfg.insertion = Insertion::Sequential;
    cfg.validate().unwrap();
    cfg.adaptor_s = None;
    cfg.insertion = Insertion::Parallel;
    assert!(cfg.validate().is_err());
    let plain = BlockConfig {
        insertion: Insertion::Sequential,
        ..BlockConfig::default()
    };
    assert!(plain.validate().is_err());
    assert!(insert_adaptor(&BlockConfig::default(), Insertion::Parallel).is_err());
    let mut bad = BlockConfig::with_adaptors(8, Insertion::Parallel);
    bad.adaptor_s.as_mut().unwrap().residual = Some(true);
    assert!(bad.validate().is_err());
}

#[test]
fn block_loss_gradient_matches_finite_differences() {
    for seed in [0, 7] {
        let r = block_gradient_check(seed).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{} at {:?}", r.max_rel_error, r.worst);
    }
}

#[test]
fn parallel_branch_leaves_base_gradients_unchanged() {
    let b = Block::new(BlockConfig::with_adaptors(4, Insertion::Parallel), &mut SplitMix64::new(21)).unwrap();
    let plain = adaptor_free_twin(&b);
    let x = grid(4, 4, 4, 22);
    let grads = |blk: &Block| {
        let mut store = blk.store.clone();
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = block_tape(&mut t, &store, &blk.config, &blk.ids, xv).unwrap();
        let l = weighted_sum(&mut t, y, 23).unwrap();
        t.backward(l).unwrap().accumulate(&mut store).unwrap();
        store
    };
    let (gp, ga) = (grads(&plain), grads(&b));
    for p in gp.iter() {
        let q = ga.get(ga.find(&p.name).unwrap());
        assert!(p.grad.max_abs_diff(&q.grad) <= 1e-12, "{}", p.name);
    }
    let s_grad: f64 = ga
        .iter()
        .filter(|p| p.group == ParamGroup::AdaptorS)
        .map(|p| p.grad.max_abs())
        .fold(0.0, f64::max);
    assert!(s_grad > 1e-6);
}

fn toy_backbone(block: BlockConfig, seed: u64) -> Backbone {
    Backbone::new(BackboneConfig::default(), block, &mut SplitMix64::new(seed)).unwrap()
}

#[test]
fn backbone_shapes() {
    let m = toy_backbone(BlockConfig::with_adaptors(8, Insertion::Sequential), 1);
    let img = grid(8, 8, 1, 2);
    assert_eq!(m.logits(&img).unwrap().shape(), &[2]);
    assert_eq!(m.features(&img).unwrap().shape(), &[64]);
    assert!(m.logits(&grid(6, 8, 1, 2)).is_err());
    assert!(m.logits(&grid(8, 8, 3, 2)).is_err());
    let mut bad = BackboneConfig::default();
    bad.stage_dims = vec![8, 16, 24, 48];
    assert!(bad.validate().is_err());
}

#[test]
fn zero_backbone_emits_head_bias() {
    let mut m = toy_backbone(BlockConfig::default(), 3);
    for id in m.store.ids().collect::<Vec<_>>() {
        let p = m.store.get_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
    let hb = m.ids.head_b;
    m.store.get_mut(hb).value = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
    let z = m.logits(&grid(16, 8, 1, 4)).unwrap();
    assert_eq!(z.data(), &[0.3, -0.7]);
}

#[test]
fn adaptors_are_a_small_fraction() {
    let m = toy_backbone(BlockConfig::with_adaptors(8, Insertion::Parallel), 1);
    let adaptor: usize = m.store.iter().filter(|p| p.group.is_adaptor()).map(|p| p.value.len()).sum();
    // independent enumeration: T = 2 predictors of K·S×(N+1), S = 2 banks of D·9
    let per_t = 2 * (4 * 2) * (4 + 1);
    let s: usize = [8, 16, 32, 64].iter().map(|d| 2 * d * 9).sum();
    assert_eq!(adaptor, 4 * per_t + s);
    assert!((adaptor as f64) < 0.1 * m.store.total_count() as f64);
}

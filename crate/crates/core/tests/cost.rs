use laconv::cost::{self, flops_of, params_of, Layer};
use laconv::flops::count_macs;
use laconv::laconv::{Generation, LaConvBlock, LaConvSpec};
use laconv::net::{build, HeadKind, LaConvNet, NetConfig};
use laconv::params::{ParamStore, Session};
use laconv::text::{TokenBatch, Vocabulary};
use laconv::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn dyconv_is_one_over_d_of_standard_conv(h in 1usize..64, w in 1usize..64, k in (0usize..4).prop_map(|i| 2 * i + 1), d in 1usize..512) {
        let dy = flops_of(&Layer::DynamicConv { kernel: k, d, groups: 1 }, h, w);
        let st = flops_of(&Layer::StandardConv { kernel: k, d_in: d, d_out: d }, h, w);
        prop_assert_eq!(dy * d as u64, st);
    }

    #[test]
    fn report_params_do_not_depend_on_resolution(scale in 0u32..3, l in 1usize..16) {
        let cfg = build("toy").unwrap();
        let a = cost::report(&cfg, l).unwrap();
        let b = cost::report(&cfg.clone().with_resolution(64 << scale), l).unwrap();
        prop_assert_eq!(a.total_params(), b.total_params());
        prop_assert_eq!(b.total_flops(), b.rows.iter().map(|r| r.flops).sum::<u64>());
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::from_words(["red", "blue", "square", "disc", "left", "of"])
}

#[test]
fn dyconv_counter_matches_on_tiny_map() {
    let mut store = ParamStore::<f64>::new();
    let mut s = Session::new(&mut store, false);
    let x = s.graph.constant(Tensor::ones([1, 3, 3, 4]));
    let w = s.graph.constant(Tensor::ones([1, 3, 3, 3, 3, 2]));
    let (_, macs) = count_macs(|| s.graph.dyconv(x, w).unwrap());
    assert_eq!(macs, flops_of(&Layer::DynamicConv { kernel: 3, d: 4, groups: 2 }, 3, 3));
}

#[test]
fn block_counter_matches_on_tiny_map() {
    for generation in [Generation::Conditioned, Generation::LanguageOnly] {
        let spec = LaConvSpec { dim: 4, text_dim: 6, kernel: 3, groups: 2, packing: 1, heads: 2, generation };
        let block = LaConvBlock::new("b", spec).unwrap();
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let trainable: u64 = store.trainable().map(|p| p.value.len() as u64).sum();
        let mut s = Session::new(&mut store, true);
        let x = s.graph.constant(Tensor::ones([1, 3, 3, 4]));
        let yv = s.graph.constant(Tensor::ones([1, 5, 6]));
        let y = laconv::text::TextVars::from_features(&mut s.graph, yv, &[true; 5]).unwrap();
        let (_, macs) = count_macs(|| block.forward(&mut s, x, &y).unwrap());
        let layers = [
            Layer::Generator { d: 4, d_text: 6, kernel: 3, groups: 2, packing: 1, text_len: 5, generation },
            Layer::DynamicConv { kernel: 3, d: 4, groups: 2 },
            Layer::BatchNorm { d: 4 },
            Layer::Mlp { d: 4 },
        ];
        assert_eq!(macs, layers.iter().map(|l| flops_of(l, 3, 3)).sum::<u64>(), "{generation:?}");
        assert_eq!(trainable, layers.iter().map(params_of).sum::<u64>(), "{generation:?}");
    }
}

fn check_network(cfg: NetConfig, words: &str) {
    let v = vocab();
    let net = LaConvNet::new(cfg.clone(), v.len()).unwrap();
    let mut store = net.init::<f32>(0).unwrap();
    let ids = v.tokenize(words).unwrap();
    let l = ids.len();
    let tb = TokenBatch::new(&[ids], cfg.text.max_len).unwrap();
    let rep = cost::report(&cfg, l).unwrap();
    let text = cost::text_encoder(&cfg.text, v.len(), l);
    let trainable: u64 = store.trainable().map(|p| p.value.len() as u64).sum();
    assert_eq!(trainable, rep.total_params() + text.params, "{}", cfg.name);

    let r = cfg.resolution;
    let mut s = Session::new(&mut store, false);
    let img = s.graph.constant(Tensor::full([1, r, r, 3], 0.5));
    let (_, macs) = count_macs(|| net.logits(&mut s, img, &tb).unwrap());
    assert_eq!(macs, rep.total_flops() + text.flops, "{}", cfg.name);
}

#[test]
fn network_counts_match_runtime() {
    let toy = build("toy").unwrap();
    check_network(toy.clone(), "red square left of blue disc");
    check_network(toy.clone().without_packing(), "red square");
    check_network(toy.clone().with_generation(Generation::LanguageOnly), "blue disc");
    let mut answer = toy;
    answer.head = HeadKind::Answer;
    check_network(answer, "red disc");
}

#[test]
fn toy_total_matches_hand_enumeration() {
    let cfg = build("toy").unwrap();
    let l = 4;
    let rep = cost::report(&cfg, l).unwrap();
    // stem 64x64x3->16; stage1 32x32 d16 k3 g4 s4; stage2 16x16 32 k5 g8 s2 x2; stage3 8x8 64 k5 g16 s1 x2.
    let gen = |hw: u64, d: u64, k: u64, g: u64, s: u64| {
        let n = hw / (s * s);
        n * s * s * d * d + 2 * l as u64 * 64 * d + 2 * n * l as u64 * d + n * d * d + hw * d * k * k * g
    };
    let block = |hw: u64, d: u64, k: u64, g: u64, s: u64| gen(hw, d, k, g, s) + hw * k * k * d + 8 * hw * d * d;
    let want = 4096 * 3 * 16
        + block(1024, 16, 3, 4, 4)
        + 256 * 16 * 32
        + 2 * block(256, 32, 5, 8, 2)
        + 64 * 32 * 64
        + 2 * block(64, 64, 5, 16, 1)
        + 64 * 64;
    assert_eq!(rep.total_flops(), want);
}

#[test]
fn paper_s_backbone_count_is_stable() {
    let a = cost::report(&build("paper-S").unwrap(), 10).unwrap();
    let b = cost::report(&build("paper-S").unwrap(), 10).unwrap();
    assert_eq!(a, b);
    assert!(a.backbone_params() > 0);
}

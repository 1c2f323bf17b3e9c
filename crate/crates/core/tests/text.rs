use laconv::params::{ParamStore, Session};
use laconv::text::{TextConfig, TextEncoder, TokenBatch, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Encoded {
    features: Vec<f64>,
    pooled: Vec<f64>,
    attention: Vec<f64>,
    shape: [usize; 3],
}

fn vocab() -> Vocabulary {
    Vocabulary::from_words(["the", "red", "blue", "square", "disc", "left", "of", "above"])
}

fn setup(seed: u64) -> (TextEncoder, ParamStore<f64>) {
    let enc = TextEncoder::new(TextConfig { embed_dim: 6, hidden: 8, heads: 2, max_len: 10 }, vocab().len()).unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (enc, store)
}

fn encode(enc: &TextEncoder, store: &mut ParamStore<f64>, tb: &TokenBatch) -> Encoded {
    let mut s = Session::new(store, false);
    s.set_capture(Some("text".into()));
    let y = enc.encode(&mut s, tb).unwrap();
    let attn = s.captured()["self_attention"];
    Encoded {
        features: s.graph.value(y.features).to_vec(),
        pooled: s.graph.value(y.pooled).to_vec(),
        attention: s.graph.value(attn).to_vec(),
        shape: [y.batch, y.len, y.dim],
    }
}

fn batch(texts: &[&str]) -> TokenBatch {
    let v = vocab();
    let seqs: Vec<Vec<usize>> = texts.iter().map(|t| v.tokenize(t).unwrap()).collect();
    TokenBatch::new(&seqs, 10).unwrap()
}

#[test]
fn single_token_sequence() {
    let (enc, mut store) = setup(1);
    let out = encode(&enc, &mut store, &batch(&["red"]));
    assert_eq!(out.shape, [1, 1, 8]);
    assert_eq!(out.features, out.pooled, "mean of one row is that row");
    assert!(out.attention.iter().all(|&a| a == 1.0));
}

#[test]
fn extra_padding_leaves_real_outputs_unchanged() {
    let (enc, mut store) = setup(2);
    let tb = batch(&["the red square left of the blue disc", "blue disc"]);
    let base = encode(&enc, &mut store, &tb);
    let padded = encode(&enc, &mut store, &tb.padded(3));
    let (l, d) = (tb.len, 8);
    for b in 0..2 {
        for t in 0..l {
            for c in 0..d {
                let x = base.features[(b * l + t) * d + c];
                let y = padded.features[(b * (l + 3) + t) * d + c];
                assert!((x - y).abs() < 1e-5, "b{b} t{t} c{c}: {x} vs {y}");
            }
        }
        for t in l..l + 3 {
            assert!(padded.features[(b * (l + 3) + t) * d..][..d].iter().all(|&v| v == 0.0));
        }
    }
    for (x, y) in base.pooled.iter().zip(&padded.pooled) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn word_order_matters() {
    let (enc, mut store) = setup(3);
    let out = encode(&enc, &mut store, &batch(&["red square left of blue disc", "blue disc left of red square"]));
    let (a, b) = out.pooled.split_at(8);
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-4, "pooled difference {diff}");
}

#[test]
fn pooled_is_the_masked_mean() {
    let (enc, mut store) = setup(4);
    let tb = batch(&["red square", "the blue disc above the red square", "disc"]);
    let out = encode(&enc, &mut store, &tb);
    let (l, d) = (tb.len, 8);
    for b in 0..3 {
        let rows: Vec<usize> = (0..l).filter(|&t| tb.mask[b * l + t]).collect();
        for c in 0..d {
            let sum: f64 = rows.iter().map(|&t| out.features[(b * l + t) * d + c]).sum();
            let mean = sum / rows.len() as f64;
            assert!((out.pooled[b * d + c] - mean).abs() <= 1e-15 * mean.abs().max(1.0));
        }
    }
}

#[test]
fn padded_keys_get_no_attention() {
    let (enc, mut store) = setup(5);
    let tb = batch(&["the red square left of the blue disc", "red"]);
    let out = encode(&enc, &mut store, &tb);
    let (l, heads) = (tb.len, 2);
    for b in 0..2 {
        for h in 0..heads {
            for q in 0..l {
                let row = &out.attention[((b * heads + h) * l + q) * l..][..l];
                for (k, &a) in row.iter().enumerate() {
                    if !tb.mask[b * l + k] {
                        assert_eq!(a, 0.0);
                    }
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn same_seed_same_encoding() {
    let tb = batch(&["blue square above red disc"]);
    let (e1, mut s1) = setup(9);
    let (e2, mut s2) = setup(9);
    assert_eq!(encode(&e1, &mut s1, &tb).features, encode(&e2, &mut s2, &tb).features);
    let (e3, mut s3) = setup(10);
    assert_ne!(encode(&e1, &mut s1, &tb).features, encode(&e3, &mut s3, &tb).features);
}

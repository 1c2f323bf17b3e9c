use std::collections::{HashMap, HashSet};

use laconv::synth::{self, gen_scene, Example, Kind, Scene, Split, GRID};
use laconv::Error;

/// Independent semantics: parse the words back and brute-force every object.
fn satisfiers(scene: &Scene, expr: &str) -> Vec<usize> {
    let words: Vec<&str> = expr.split(' ').collect();
    let matches = |o: &synth::Object, c: &str, s: &str| o.color.word() == c && o.shape.word() == s;
    let rc = |cell: usize| ((cell / GRID) as i64, (cell % GRID) as i64);
    match words.as_slice() {
        [c, s] => scene.objects.iter().filter(|o| matches(o, c, s)).map(|o| o.cell).collect(),
        [c, s, rel @ .., lc, ls] => {
            let landmarks: Vec<_> = scene.objects.iter().filter(|o| matches(o, lc, ls)).collect();
            assert_eq!(landmarks.len(), 1, "landmark of {expr:?} is not unique");
            let (lr, lcol) = rc(landmarks[0].cell);
            scene
                .objects
                .iter()
                .filter(|o| matches(o, c, s) && o.cell != landmarks[0].cell)
                .filter(|o| {
                    let (r, col) = rc(o.cell);
                    match rel {
                        ["left", "of"] => col < lcol,
                        ["right", "of"] => col > lcol,
                        ["above"] => r < lr,
                        ["below"] => r > lr,
                        other => panic!("unknown relation {other:?}"),
                    }
                })
                .map(|o| o.cell)
                .collect()
        }
        _ => panic!("unparseable {expr:?}"),
    }
}

fn answer(scene: &Scene, expr: &str) -> usize {
    let words: Vec<&str> = expr.split(' ').collect();
    let n = scene.objects.iter().filter(|o| o.color.word() == words[1] && o.shape.word() == words[2]).count();
    match words[0] {
        "count" => 2 + n,
        "exist" => usize::from(n == 0),
        other => panic!("unknown question {other}"),
    }
}

#[test]
fn stored_targets_are_unique_satisfiers() {
    let data = synth::generate(10_000, 0, 11, &Kind::LOCATE).unwrap();
    let mut per_kind = HashMap::new();
    for ex in &data {
        let scene = gen_scene(ex.seed).unwrap();
        assert_eq!(satisfiers(&scene, &ex.expression), vec![ex.target], "{ex:?}");
        *per_kind.entry(ex.kind).or_insert(0) += 1;
    }
    assert!(per_kind[&Kind::Attribute] > 4000 && per_kind[&Kind::Spatial] > 4000, "{per_kind:?}");
}

#[test]
fn question_answers_match_recount() {
    for ex in synth::generate(2000, 0, 12, &Kind::ANSWER).unwrap() {
        assert_eq!(answer(&gen_scene(ex.seed).unwrap(), &ex.expression), ex.target, "{ex:?}");
    }
}

#[test]
fn cells_are_never_shared() {
    for seed in 0..10_000 {
        let scene = gen_scene(seed).unwrap();
        let cells: HashSet<usize> = scene.objects.iter().map(|o| o.cell).collect();
        assert_eq!(cells.len(), scene.objects.len());
        assert!(cells.iter().all(|&c| c < GRID * GRID));
    }
}

#[test]
fn attribute_classes_are_balanced() {
    let data = synth::generate(10_000, 0, 13, &[Kind::Attribute]).unwrap();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in &data {
        *counts.entry(ex.expression.as_str()).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 12);
    assert!(counts.values().all(|&c| c * 20 >= data.len()), "{counts:?}");
}

#[test]
fn dataset_round_trip_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(synth::DATASET_FILE);
    let data = synth::generate(70, 30, 14, &Kind::LOCATE).unwrap();
    synth::write_dataset(&path, &data).unwrap();
    let back = synth::read_dataset(&path).unwrap();
    assert_eq!(back, data);
    let train = synth::split(&back, Split::Train);
    let test = synth::split(&back, Split::Test);
    assert_eq!((train.len(), test.len()), (70, 30));
    let keys: HashSet<(u64, &str)> = train.iter().map(|e| (e.seed, e.expression.as_str())).collect();
    assert!(test.iter().all(|e| !keys.contains(&(e.seed, e.expression.as_str()))));
    let again = synth::generate(70, 30, 14, &Kind::LOCATE).unwrap();
    assert_eq!(again, data);
}

#[test]
fn version_and_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    std::fs::write(&path, "{\"version\":2,\"grid\":8,\"cell_px\":8}\n").unwrap();
    assert!(matches!(synth::read_dataset(&path), Err(Error::Version { expected: 1, found: 2 })));

    let ex = Example { expression: "red square".into(), target: 3, seed: 0, kind: Kind::Attribute, split: Split::Train };
    let good = serde_json::to_string(&ex).unwrap();
    std::fs::write(&path, format!("{{\"version\":1,\"grid\":8,\"cell_px\":8}}\n{good}\n{{\"expression\":3}}\n")).unwrap();
    match synth::read_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn render_is_bitwise_deterministic() {
    for seed in [0u64, 1, 99] {
        let a = synth::render(&gen_scene(seed).unwrap());
        let b = synth::render(&gen_scene(seed).unwrap());
        assert_eq!(a.data(), b.data());
    }
}

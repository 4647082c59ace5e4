use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};

use rand::{Rng, SeedableRng};
use scalelens::predictor::protocol::{serve, Request, WireTile};
use scalelens::predictor::{evaluate_accuracy, BuiltinScorer, Endpoint, ExternalScorer, ScorerConfig, TileScorer};
use scalelens::slide_io::{phantom_cases, render_phantom_slide, PhantomSpec};
use scalelens::tiling::{build_tissue_mask, sample_tiles};
use scalelens::{Error, Label, Tile};
use serde_json::Value;

/// Colour-only phantom: MetPos tiles are redder, nothing else differs.
fn tiles(per_case: usize) -> (Vec<Tile>, Vec<Label>) {
    let spec = PhantomSpec {
        n_cases_pos: 2,
        n_cases_neg: 2,
        slide_px: 2240,
        color_shift: 0.03,
        texture_amplitude: 0.0,
        macro_contrast: 0.0,
        seed: 4,
        ..PhantomSpec::default()
    };
    let mut t = Vec::new();
    let mut l = Vec::new();
    for (i, case) in phantom_cases(&spec).iter().enumerate() {
        let slide = render_phantom_slide(&spec, case).unwrap().slide;
        let mask = build_tissue_mask(&slide).unwrap();
        let got = sample_tiles(&mask, &slide, per_case, 100 + i as u64).unwrap();
        l.extend(std::iter::repeat_n(case.label, got.len()));
        t.extend(got);
    }
    (t, l)
}

fn spawn_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        let scorer = BuiltinScorer::new();
        std::thread::scope(|s| {
            for conn in listener.incoming().flatten() {
                let scorer = &scorer;
                s.spawn(move || {
                    let read = conn.try_clone().unwrap();
                    let _ = serve(BufReader::new(read), conn, scorer);
                });
            }
        });
    });
    addr
}

fn config() -> ScorerConfig {
    ScorerConfig {
        epochs: 60,
        ..ScorerConfig::default()
    }
}

#[test]
fn builtin_separates_colour_phantom() {
    let (t, l) = tiles(12);
    let s = BuiltinScorer::new();
    // Train on cases 0 and 2 (one per class), test on 1 and 3.
    let split = |keep: &dyn Fn(usize) -> bool| {
        let idx: Vec<usize> = (0..t.len()).filter(|&i| keep(i / 12)).collect();
        (idx.iter().map(|&i| t[i].clone()).collect::<Vec<_>>(), idx.iter().map(|&i| l[i]).collect::<Vec<_>>())
    };
    let (tr, trl) = split(&|c| c % 2 == 0);
    let (te, tel) = split(&|c| c % 2 == 1);
    let m = s.train("colour", &tr, &trl, &ScorerConfig::default()).unwrap();
    let scores = s.score_batch(&m, &te).unwrap();
    let acc = evaluate_accuracy(&scores, &tel, 0.5).unwrap();
    assert!(acc > 0.9, "held-out accuracy {acc}");
}

#[test]
fn tcp_scorer_matches_in_process_scorer() {
    let (t, l) = tiles(4);
    let addr = spawn_server();
    let remote = ExternalScorer::new(Endpoint::parse(&addr).unwrap());
    remote.ping().unwrap();
    let local = BuiltinScorer::new();
    let a = remote.train("m1", &t, &l, &config()).unwrap();
    let b = local.train("m1", &t, &l, &config()).unwrap();
    assert_eq!(a.id, b.id);
    for tile in t.iter().take(6) {
        assert_eq!(remote.score(&a, tile).unwrap().to_bits(), local.score(&b, tile).unwrap().to_bits());
    }
    let ghost = scalelens::predictor::ModelHandle {
        id: "ghost".into(),
        ..a.clone()
    };
    assert!(matches!(remote.score(&ghost, &t[0]), Err(Error::UnknownModel(_))));
}

fn exchange(stream: &mut TcpStream, reader: &mut BufReader<TcpStream>, line: &str) -> Value {
    stream.write_all(line.as_bytes()).unwrap();
    stream.write_all(b"\n").unwrap();
    let mut reply = String::new();
    reader.read_line(&mut reply).unwrap();
    serde_json::from_str(&reply).unwrap()
}

#[test]
fn malformed_requests_get_structured_errors() {
    let addr = spawn_server();
    let mut stream = TcpStream::connect(&addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let small = Tile::new("s", 0, 0, image::RgbImage::new(224, 224), 0.5);
    let mut wire = WireTile::encode(&small, None);
    wire.w = 100;
    wire.h = 100;
    let shape = Request::Score {
        model_id: "m".into(),
        tile: wire,
    };
    let shape_line = shape.to_line();
    let fixed = [
        ("{not json", "BAD_JSON"),
        ("[1,2]", "BAD_JSON"),
        (r#"{"op":"dance"}"#, "BAD_REQUEST"),
        (r#"{"op":"score","model_id":"nope","tile":{"id":"t","w":224,"h":224,"rgb_b64":""}}"#, "SHAPE_MISMATCH"),
        (shape_line.trim_end(), "SHAPE_MISMATCH"),
    ];
    for (line, code) in fixed {
        let v = exchange(&mut stream, &mut reader, line);
        assert_eq!(v["error"], code, "{line}");
        assert!(v["message"].is_string());
    }
    let good = Request::Score {
        model_id: "nope".into(),
        tile: WireTile::encode(&small, None),
    };
    assert_eq!(exchange(&mut stream, &mut reader, good.to_line().trim_end())["error"], "UNKNOWN_MODEL");

    // Random byte mutations of a valid request never take the server down.
    let base = good.to_line();
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    for _ in 0..100 {
        let mut bytes: Vec<u8> = base.bytes().filter(|&b| b != b'\n').collect();
        for _ in 0..rng.random_range(1..6) {
            let i = rng.random_range(0..bytes.len());
            bytes[i] = rng.random_range(0x20..0x7f);
        }
        let line = String::from_utf8(bytes).unwrap();
        let v = exchange(&mut stream, &mut reader, &line);
        assert!(v.get("error").is_some_and(Value::is_string), "{line} -> {v}");
    }
    assert_eq!(exchange(&mut stream, &mut reader, r#"{"op":"ping"}"#), serde_json::json!({"ok": true}));
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A lexicon of `concepts` random words (about one in ten two-word) and a
/// JSON-lines corpus of `captions` captions, each mixing about `tokens`
/// filler and lexicon words.
pub fn synthetic_corpus(seed: u64, concepts: usize, captions: usize, tokens: usize) -> (String, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(3..10);
        (0..n).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
    };
    let mut seen = std::collections::BTreeSet::new();
    let mut lexicon = Vec::with_capacity(concepts);
    while lexicon.len() < concepts {
        let w = if rng.gen_bool(0.1) {
            format!("{} {}", word(&mut rng), word(&mut rng))
        } else {
            word(&mut rng)
        };
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    let filler: Vec<String> = ["a", "the", "of", "on", "with", "in", "and", "at"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..200).map(|_| word(&mut rng)))
        .collect();
    let mut corpus = Vec::with_capacity(captions * tokens * 8);
    for i in 0..captions {
        let n = rng.gen_range(tokens / 2..=tokens * 3 / 2);
        let text: Vec<&str> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    lexicon[rng.gen_range(0..lexicon.len())].as_str()
                } else {
                    filler[rng.gen_range(0..filler.len())].as_str()
                }
            })
            .collect();
        let rec = serde_json::json!({ "id": format!("s{i}"), "text": text.join(" ") });
        corpus.extend_from_slice(rec.to_string().as_bytes());
        corpus.push(b'\n');
    }
    (lexicon.join("\n") + "\n", corpus)
}

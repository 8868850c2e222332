use graft_core::corpus::RawDocument;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FA_SUBJ: [&str; 5] = ["مادرم", "دوست من", "همسایه‌ی ما", "معلم جوان", "برادر کوچکم"];
pub const FA_TIME: [&str; 4] = ["امروز صبح", "دیروز عصر", "هفته‌ی گذشته", "شب گذشته"];
pub const FA_REST: [&str; 4] = [
    "به بازار رفت و میوه خرید",
    "کتاب تازه‌ای را با دقت خواند",
    "در باغ درختان را آب داد",
    "برای خانواده غذای خوشمزه‌ای پخت",
];
pub const EN: [&str; 10] = [
    "The train left the station on time this morning",
    "My neighbour repaired the old bicycle in the garage",
    "We watched a long film about the history of the city",
    "Please remember to close the windows before you leave",
    "The children built a small house out of wooden blocks",
    "She bought fresh bread from the bakery on the corner",
    "Our team finished the project two days before the deadline",
    "The museum opens early on weekends during the summer",
    "He forgot his umbrella and got wet on the way home",
    "They planted tomatoes and beans in the back garden",
];
pub const BANNED: [&str; 5] = ["ادامه مطلب", "کلیک کنید", "https://example", "<br", "تمامی حقوق محفوظ است"];
pub const SHORT: [&str; 4] = ["سلام", "خیلی ممنون", "بله درست است", "او به خانه رفت"];

pub struct Manifest {
    pub kept: u64,
    pub short: u64,
    pub banned: u64,
    pub language: u64,
    pub duplicate: u64,
}

/// 100 sentences: 60 clean Persian, 15 short, 5 with banned markup, 10
/// English and 10 planted duplicates, shuffled and grouped into documents.
pub fn fixture_100(seed: u64) -> (Vec<RawDocument>, Manifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean = Vec::new();
    'outer: for s in FA_SUBJ {
        for t in FA_TIME {
            for r in FA_REST {
                clean.push(format!("{s} {t} {r}."));
                if clean.len() == 60 {
                    break 'outer;
                }
            }
        }
    }
    let mut labelled: Vec<(String, &str)> = clean.iter().map(|s| (s.clone(), "keep")).collect();
    for i in 0..15 {
        labelled.push((format!("{}.", SHORT[i % SHORT.len()]), "short"));
    }
    for (i, b) in BANNED.iter().enumerate() {
        labelled.push((format!("{} {b}.", clean[i * 7].trim_end_matches('.')), "banned"));
    }
    for e in EN {
        labelled.push((format!("{e}."), "language"));
    }
    labelled.shuffle(&mut rng);
    for _ in 0..10 {
        // a copy placed after the first occurrence of a clean sentence
        let (pick, at) = loop {
            let i = rng.random_range(0..labelled.len());
            if labelled[i].1 == "keep" {
                break (labelled[i].0.clone(), rng.random_range(i + 1..=labelled.len()));
            }
        };
        labelled.insert(at, (pick, "dup"));
    }
    assert_eq!(labelled.len(), 100);
    let docs = labelled
        .chunks(7)
        .enumerate()
        .map(|(i, c)| RawDocument {
            id: format!("doc-{i}"),
            source: if i % 2 == 0 { "news".into() } else { "wiki".into() },
            text: c.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>().join(" "),
        })
        .collect();
    (docs, Manifest { kept: 60, short: 15, banned: 5, language: 10, duplicate: 10 })
}


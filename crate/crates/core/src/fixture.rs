//! Synthetic judgment corpus for smoke runs: document bodies, the metadata
//! sidecar, a few statute passages and a pipeline configuration.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::LawText;
use crate::corpus::{DocMeta, DocType};

const PROVINCES: [(&str, &str); 3] = [("北京", "海淀区"), ("上海", "浦东新区"), ("广东", "天河区")];
const SURNAMES: [&str; 6] = ["张", "李", "王", "赵", "刘", "陈"];
const CN_DIGITS: [&str; 10] = ["零", "一", "二", "三", "四", "五", "六", "七", "八", "九"];

const LAWS: [(&str, &str); 3] = [
    (
        "第二百六十四条",
        "盗窃公私财物，数额较大的，或者多次盗窃、入户盗窃、携带凶器盗窃、扒窃的，处三年以下有期徒刑、拘役或者管制，并处或者单处罚金。",
    ),
    (
        "第二百三十四条",
        "故意伤害他人身体的，处三年以下有期徒刑、拘役或者管制。致人重伤的，处三年以上十年以下有期徒刑。",
    ),
    (
        "第六十七条",
        "犯罪以后自动投案，如实供述自己的罪行的，是自首。对于自首的犯罪分子，可以从轻或者减轻处罚。",
    ),
];

fn cn_small(n: u32) -> String {
    match n {
        0..=9 => CN_DIGITS[n as usize].to_string(),
        10 => "十".to_string(),
        11..=19 => format!("十{}", CN_DIGITS[(n - 10) as usize]),
        _ => {
            let (t, u) = (n / 10, n % 10);
            let tail = if u == 0 { String::new() } else { CN_DIGITS[u as usize].to_string() };
            format!("{}十{tail}", CN_DIGITS[t as usize])
        }
    }
}

fn cn_duration(months: u32) -> String {
    let (y, m) = (months / 12, months % 12);
    match (y, m) {
        (0, m) => format!("{}个月", cn_small(m)),
        (y, 0) => format!("{}年", cn_small(y)),
        (y, m) => format!("{}年{}个月", cn_small(y), cn_small(m)),
    }
}

struct Case {
    meta: DocMeta,
    body: String,
}

fn theft_case(id: String, province: (&str, &str), year: u32, rng: &mut ChaCha8Rng) -> Case {
    let name = format!("{}某", SURNAMES[rng.random_range(0..SURNAMES.len())]);
    let amount = rng.random_range(20..200) * 100;
    let months = rng.random_range(6..36);
    let fine = rng.random_range(2..20) * 1000;
    let surrender = rng.random_bool(0.5);
    let probation = (months <= 24 && rng.random_bool(0.5)).then(|| months + 12);
    let mut features = IndexMap::new();
    features.insert("有期徒刑".to_string(), cn_duration(months));
    features.insert("罚金".to_string(), fine.to_string());
    features.insert("犯罪金额".to_string(), amount.to_string());
    if surrender {
        features.insert("自首".to_string(), "是".to_string());
    }
    if let Some(p) = probation {
        features.insert("缓刑".to_string(), cn_duration(p));
    }
    let mut body = format!(
        "{}市{}人民法院\n刑事判决书\n公诉机关{}市{}人民检察院。被告人{name}，男，汉族。\n\
         经审理查明，{year}年{}月，被告人{name}在本区某小区内窃得电动自行车等财物，犯罪金额{amount}元。\n\
         本院认为，被告人{name}以非法占有为目的，秘密窃取他人财物，数额较大，其行为已构成盗窃罪。",
        province.0,
        province.1,
        province.0,
        province.1,
        rng.random_range(1..=12)
    );
    if surrender {
        body.push_str(&format!("被告人{name}案发后主动投案，如实供述犯罪事实，系自首，依法可以从轻处罚。"));
    }
    body.push_str(&format!(
        "\n判决如下：\n被告人{name}犯盗窃罪，判处有期徒刑{}",
        cn_duration(months)
    ));
    if let Some(p) = probation {
        body.push_str(&format!("，缓刑{}", cn_duration(p)));
    }
    body.push_str(&format!("，并处罚金{fine}元。\n"));
    Case {
        meta: DocMeta {
            id,
            doc_type: DocType::Judgment,
            year,
            province: province.0.to_string(),
            crime_type: "盗窃罪".to_string(),
            procedure: "一审".to_string(),
            features,
        },
        body,
    }
}

fn injury_case(id: String, province: (&str, &str), year: u32, rng: &mut ChaCha8Rng) -> Case {
    let name = format!("{}某", SURNAMES[rng.random_range(0..SURNAMES.len())]);
    let light = rng.random_range(1..4);
    let months = rng.random_range(6..30);
    let mut features = IndexMap::new();
    features.insert("有期徒刑".to_string(), cn_duration(months));
    features.insert("轻伤人数".to_string(), cn_small(light));
    let armed = rng.random_bool(0.5);
    if armed {
        features.insert("持械".to_string(), "是".to_string());
    }
    let weapon = if armed { "持械" } else { "徒手" };
    let body = format!(
        "{}市{}人民法院\n刑事判决书\n公诉机关{}市{}人民检察院。被告人{name}。\n\
         审理查明，{year}年{}月，被告人{name}因琐事与他人发生争执，{weapon}殴打被害人，致轻伤人数{}人。\n\
         本院认为，被告人{name}故意伤害他人身体，致人轻伤，其行为已构成故意伤害罪。\n\
         判决如下：\n被告人{name}犯故意伤害罪，判处有期徒刑{}。\n",
        province.0,
        province.1,
        province.0,
        province.1,
        rng.random_range(1..=12),
        cn_small(light),
        cn_duration(months)
    );
    Case {
        meta: DocMeta {
            id,
            doc_type: DocType::Judgment,
            year,
            province: province.0.to_string(),
            crime_type: "故意伤害罪".to_string(),
            procedure: "一审".to_string(),
            features,
        },
        body,
    }
}

fn ruling_case(id: String, province: (&str, &str), year: u32) -> Case {
    let body = format!(
        "{}市{}人民法院\n刑事裁定书\n本院认为，原审判决认定事实清楚，适用法律正确。\n裁判结果：驳回上诉，维持原判。\n",
        province.0, province.1
    );
    Case {
        meta: DocMeta {
            id,
            doc_type: DocType::Ruling,
            year,
            province: province.0.to_string(),
            crime_type: "盗窃罪".to_string(),
            procedure: "二审".to_string(),
            features: IndexMap::new(),
        },
        body,
    }
}

/// Paths written by [`write_fixture`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixturePaths {
    pub docs_dir: PathBuf,
    pub metadata: PathBuf,
    pub laws: PathBuf,
    pub config: PathBuf,
}

/// Writes `n_docs` documents under `dir/docs`. Every tenth document is a
/// ruling and every seventh predates 2020, so the corpus filters have
/// something to drop.
pub fn write_fixture(dir: &Path, n_docs: usize, seed: u64) -> std::io::Result<FixturePaths> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs_dir = dir.join("docs");
    fs::create_dir_all(&docs_dir)?;
    let mut meta_lines = String::new();
    for i in 0..n_docs {
        let id = format!("doc{:03}", i + 1);
        let province = PROVINCES[i % PROVINCES.len()];
        let year = if i % 7 == 6 { 2018 } else { 2020 + (i as u32 % 4) };
        let case = if i % 10 == 9 {
            ruling_case(id, province, year)
        } else if i % 3 == 2 {
            injury_case(id, province, year, &mut rng)
        } else {
            theft_case(id, province, year, &mut rng)
        };
        fs::write(docs_dir.join(format!("{}.txt", case.meta.id)), &case.body)?;
        meta_lines.push_str(&serde_json::to_string(&case.meta).expect("metadata serializes"));
        meta_lines.push('\n');
    }
    let metadata = dir.join("metadata.jsonl");
    fs::write(&metadata, meta_lines)?;

    let laws = dir.join("laws.jsonl");
    let mut law_lines = String::new();
    for (article, text) in LAWS {
        let law = LawText {
            article: article.to_string(),
            text: text.to_string(),
        };
        law_lines.push_str(&serde_json::to_string(&law).expect("law serializes"));
        law_lines.push('\n');
    }
    fs::write(&laws, law_lines)?;

    let config = dir.join("pipeline.toml");
    fs::write(
        &config,
        format!(
            "seed = {seed}\nout_dir = \"out\"\n\n[client]\nstub = true\n\n[corpus]\ninput_dir = \"docs\"\n\
             metadata = \"metadata.jsonl\"\n\n[augment]\nlaws = \"laws.jsonl\"\nnum_qa = 3\n"
        ),
    )?;
    Ok(FixturePaths {
        docs_dir,
        metadata,
        laws,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerals() {
        assert_eq!(cn_small(7), "七");
        assert_eq!(cn_small(15), "十五");
        assert_eq!(cn_small(20), "二十");
        assert_eq!(cn_duration(18), "一年六个月");
        assert_eq!(cn_duration(24), "二年");
        assert_eq!(cn_duration(8), "八个月");
    }

    #[test]
    fn deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_fixture(a.path(), 20, 3).unwrap();
        write_fixture(b.path(), 20, 3).unwrap();
        for f in ["metadata.jsonl", "docs/doc005.txt", "pipeline.toml"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let metas = crate::corpus::read_metadata(&a.path().join("metadata.jsonl")).unwrap();
        assert_eq!(metas.len(), 20);
    }
}

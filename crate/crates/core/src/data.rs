//! Note records, JSON-lines IO, splitting, the synthetic two-hospital
//! benchmark and a bag-of-words baseline.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpret::KeywordDictionary;
use crate::metrics::{threshold, LabelSet, MetricsReport};
use crate::tensor::sigmoid;
use crate::tokenizer::{Preprocessor, Tokenizer};
use crate::training::Example;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub labels: BTreeSet<String>,
}

/// Records plus the label map (sorted label names; the index is the id).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<NoteRecord>,
    pub labels: Vec<String>,
}

impl Dataset {
    /// Builds the alphabetical label map from the records.
    pub fn new(records: Vec<NoteRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate id {:?}", r.id)));
            }
        }
        let labels: BTreeSet<&String> = records.iter().flat_map(|r| &r.labels).collect();
        let labels = labels.into_iter().cloned().collect();
        Ok(Dataset { records, labels })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Label ids of `r` under `labels`; unknown names are a data error.
    pub fn label_ids(r: &NoteRecord, labels: &[String]) -> Result<LabelSet> {
        r.labels
            .iter()
            .map(|name| {
                labels
                    .binary_search(name)
                    .map_err(|_| Error::Data(format!("note {:?}: label {name:?} not in label map", r.id)))
            })
            .collect()
    }

    /// Tokenizes every note and maps its labels through `labels`.
    pub fn encode(&self, tok: &Tokenizer, labels: &[String]) -> Result<Vec<Example>> {
        self.records
            .iter()
            .map(|r| Ok(Example { ids: tok.encode(&r.text).ids, labels: Self::label_ids(r, labels)? }))
            .collect()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    #[serde(default)]
    labels: Vec<String>,
}

/// One `{"id", "text", "labels"}` object per line; blank lines are skipped,
/// unknown fields ignored. Records whose text preprocesses to nothing are
/// rejected.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let pre = Preprocessor::default();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse { path: path.to_path_buf(), line: i + 1, reason };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let id = raw.id.ok_or_else(|| parse_err("missing \"id\"".into()))?;
        let text = raw.text.ok_or_else(|| parse_err("missing \"text\"".into()))?;
        if pre.preprocess(&text).is_empty() {
            return Err(parse_err(format!("note {id:?} has no words")));
        }
        records.push(NoteRecord { id, text, labels: raw.labels.into_iter().collect() });
    }
    Dataset::new(records)
}

pub fn write_jsonl(path: &Path, records: &[NoteRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded permutation followed by contiguous cuts. The test split takes the
/// rounding remainder.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (a * n as f64).round() as usize;
    let n_valid = ((b * n as f64).round() as usize).min(n - n_train);
    let part = |idx: &[usize]| Dataset {
        records: idx.iter().map(|&i| ds.records[i].clone()).collect(),
        labels: ds.labels.clone(),
    };
    Ok((
        part(&order[..n_train]),
        part(&order[n_train..n_train + n_valid]),
        part(&order[n_train + n_valid..]),
    ))
}

/// One synthetic disease category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    /// Full spellings that mark the label.
    pub triggers: Vec<String>,
    /// Short form of each trigger, same order.
    pub abbreviations: Vec<String>,
    /// Findings that precede a trigger and also show up, negated, in
    /// unrelated notes.
    pub context: Vec<String>,
}

const CATALOG: &[(&str, &[&str], &[&str], &[&str])] = &[
    ("renal disease", &["azotemia"], &["ckd"], &["polyuria", "creatinine", "isosthenuria", "nephropathy"]),
    ("pancreatitis", &["pancreatitis"], &["panc"], &["lipase", "hunched", "anorexia"]),
    ("otitis", &["otitis"], &["oe"], &["headshaking", "pinnae", "cerumen"]),
    ("dermatitis", &["dermatitis"], &["derm"], &["pruritus", "alopecia", "erythema", "pyoderma"]),
    ("diabetes", &["diabetes"], &["dm"], &["glucosuria", "polydipsia", "hyperglycemia"]),
    ("hyperthyroidism", &["hyperthyroidism"], &["ht4"], &["tachycardia", "weightloss", "goiter"]),
    ("gastroenteritis", &["gastroenteritis"], &["ge"], &["diarrhea", "vomiting", "borborygmi", "enteritis"]),
    ("cystitis", &["cystitis"], &["uti"], &["stranguria", "hematuria", "pollakiuria"]),
    ("osteoarthritis", &["osteoarthritis"], &["oa"], &["stiffness", "crepitus", "lameness", "arthropathy"]),
    ("dental disease", &["periodontitis"], &["pd"], &["halitosis", "tartar", "calculus", "gingivitis"]),
    ("heart disease", &["cardiomyopathy"], &["hcm"], &["gallop", "dyspnea", "cough", "murmur"]),
    ("hypothyroidism", &["hypothyroidism"], &["hypot4"], &["obesity", "bradycardia", "hypotrichosis"]),
    ("conjunctivitis", &["conjunctivitis"], &["conj"], &["epiphora", "blepharospasm", "chemosis"]),
    ("cruciate rupture", &["cruciate"], &["ccl"], &["drawer", "effusion", "toetouching"]),
    ("epilepsy", &["epilepsy"], &["ie"], &["tremors", "postictal", "paddling", "seizures"]),
    ("neoplasia", &["neoplasia"], &["neo"], &["mass", "metastasis", "cachexia", "carcinoma"]),
    ("lymphoma", &["lymphoma"], &["lsa"], &["lymphadenopathy", "splenomegaly", "hypercalcemia"]),
    ("hepatopathy", &["hepatopathy"], &["hep"], &["icterus", "alt", "hepatomegaly", "cholangitis"]),
    ("anemia", &["anemia"], &["anem"], &["pallor", "hematocrit", "weakness"]),
    ("parasitism", &["parasitism"], &["paras"], &["ova", "fleas", "deworming", "giardiasis"]),
];

/// Built-in label catalog; `m ≤ 20`.
pub fn default_labels(m: usize) -> Vec<LabelSpec> {
    CATALOG
        .iter()
        .take(m)
        .map(|(n, t, a, c)| LabelSpec {
            name: n.to_string(),
            triggers: t.iter().map(|s| s.to_string()).collect(),
            abbreviations: a.iter().map(|s| s.to_string()).collect(),
            context: c.iter().map(|s| s.to_string()).collect(),
        })
        .collect()
}

/// Background vocabulary for routine sentences, paired with the spelling
/// hospital B swaps in.
const FILLER: &[(&str, &str)] = &[
    ("bright", "qar"),
    ("alert", "alrt"),
    ("responsive", "resp"),
    ("quiet", "qt"),
    ("friendly", "frndly"),
    ("appetite", "appt"),
    ("normal", "nml"),
    ("eating", "eat"),
    ("drinking", "drnk"),
    ("well", "ok"),
    ("owner", "o"),
    ("reports", "rpts"),
    ("history", "hx"),
    ("examination", "pe"),
    ("temperature", "tmp"),
    ("weight", "wt"),
    ("heart", "hrt"),
    ("rate", "rt"),
    ("respiratory", "resp-rate"),
    ("hydration", "hyd"),
    ("adequate", "adq"),
    ("mucous", "mm"),
    ("membranes", "mbs"),
    ("pink", "pk"),
    ("moist", "mst"),
    ("capillary", "crt"),
    ("refill", "rfl"),
    ("under", "<"),
    ("seconds", "sec"),
    ("abdomen", "abd"),
    ("soft", "sft"),
    ("nonpainful", "nt"),
    ("lymph", "ln"),
    ("nodes", "lns"),
    ("unremarkable", "nsf"),
    ("lungs", "lngs"),
    ("clear", "clr"),
    ("auscultation", "ausc"),
    ("vaccination", "vacc"),
    ("current", "utd"),
    ("recheck", "rck"),
    ("weeks", "wks"),
    ("days", "d"),
    ("continue", "cont"),
    ("medication", "meds"),
    ("diet", "dt"),
    ("discussed", "dw"),
    ("plan", "p"),
    ("client", "cl"),
    ("advised", "adv"),
    ("monitor", "mon"),
    ("home", "hm"),
    ("body", "bdy"),
    ("condition", "cond"),
    ("score", "bcs"),
    ("coat", "ct"),
    ("ears", "au"),
    ("eyes", "ou"),
    ("teeth", "tth"),
    ("gait", "gt"),
];

/// Routine sentence shapes; `{}` slots take filler words.
const FILLER_TEMPLATES: &[&str] = &[
    "{} {} and {} on presentation",
    "{} {} {} today",
    "{} {} within {} limits",
    "{} {} {} noted",
    "{} and {} {}",
    "{} {} {} {}",
];

const TRIGGER_TEMPLATES: &[&str] = &[
    "{c} consistent with {t}",
    "{c} and {c2} suggest {t}",
    "assessment {t} given {c}",
    "{c} noted likely {t}",
    "diagnosed with {t}",
    "assessment {t}",
    "known {t} case",
    "history of {t}",
];

/// Closing line restating a diagnosis in the spelling used earlier.
const PLAN_TEMPLATES: &[&str] = &["continue treatment for {t}", "plan recheck {t}", "discussed {t} prognosis"];

const PATIENT_NAMES: &[&str] = &[
    "bella", "max", "luna", "charlie", "lucy", "cooper", "daisy", "milo", "bailey", "rocky", "sadie", "tucker",
    "molly", "bear", "maggie", "duke", "chloe", "oliver", "zoe", "jack", "lily", "toby", "penny", "buddy",
    "rosie", "leo", "stella", "teddy", "coco", "ziggy", "pepper", "murphy", "ruby", "oscar", "willow", "finn",
];

const DISTRACTOR_TEMPLATES: &[&str] = &["no {c} noted", "owner denies {c}", "{c} not observed", "no evidence of {c}"];

/// How one hospital writes its notes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HospitalStyle {
    /// Probability that a trigger is written in short form.
    pub abbrev_rate: f64,
    /// Multiplier on the number of routine sentences.
    pub length_scale: f64,
    /// Probability that a routine word takes its alternative spelling.
    pub swap_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_labels: usize,
    /// Labeled notes from hospital A (split 90/5/5 downstream).
    pub n_a: usize,
    /// Labeled notes from hospital B (evaluation only).
    pub n_b: usize,
    /// Unlabeled hospital-B notes for pretraining.
    pub n_b_unlabeled: usize,
    /// Size of the routine vocabulary drawn from the built-in list.
    pub filler_vocab: usize,
    /// Mean routine sentences per note before `length_scale`.
    pub filler_sentences: usize,
    /// Mean negated-finding sentences per note.
    pub distractor_sentences: f64,
    /// Zipf exponent over label popularity.
    pub zipf_exponent: f64,
    /// Probability of a note with no label.
    pub empty_rate: f64,
    /// Hospital A's own abbreviation habit.
    pub base_abbrev_rate: f64,
    /// Hospital-B shift: extra abbreviation of full spellings.
    pub abbrev_rate: f64,
    pub length_scale: f64,
    pub swap_rate: f64,
    /// Overrides the built-in catalog when nonempty.
    #[serde(default)]
    pub labels: Vec<LabelSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_labels: 12,
            n_a: 440,
            n_b: 200,
            n_b_unlabeled: 1200,
            filler_vocab: FILLER.len(),
            filler_sentences: 10,
            distractor_sentences: 3.0,
            zipf_exponent: 1.0,
            empty_rate: 0.1,
            base_abbrev_rate: 0.05,
            abbrev_rate: 0.8,
            length_scale: 0.5,
            swap_rate: 0.6,
            labels: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn label_specs(&self) -> Vec<LabelSpec> {
        if self.labels.is_empty() {
            default_labels(self.n_labels)
        } else {
            self.labels.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let specs = self.label_specs();
        if specs.len() != self.n_labels || self.n_labels == 0 {
            return Err(Error::Config(format!(
                "n_labels {} but {} label specs available",
                self.n_labels,
                specs.len()
            )));
        }
        for (name, x) in [
            ("empty_rate", self.empty_rate),
            ("base_abbrev_rate", self.base_abbrev_rate),
            ("abbrev_rate", self.abbrev_rate),
            ("length_scale", self.length_scale),
            ("swap_rate", self.swap_rate),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {x}")));
            }
        }
        if self.filler_vocab == 0 || self.filler_vocab > FILLER.len() {
            return Err(Error::Config(format!("filler_vocab must be in 1..={}", FILLER.len())));
        }
        let mut seen = HashSet::new();
        for s in &specs {
            if s.triggers.is_empty() || s.triggers.len() != s.abbreviations.len() || s.context.len() < 2 {
                return Err(Error::Config(format!("label {:?}: malformed spec", s.name)));
            }
            for t in s.triggers.iter().chain(&s.abbreviations) {
                if !seen.insert(t.as_str()) {
                    return Err(Error::Config(format!("trigger {t:?} is shared between labels")));
                }
            }
        }
        Ok(())
    }

    pub fn style_a(&self) -> HospitalStyle {
        HospitalStyle { abbrev_rate: self.base_abbrev_rate, length_scale: 1.0, swap_rate: 0.0 }
    }

    /// Hospital B: A's habits plus the configured shift.
    pub fn style_b(&self) -> HospitalStyle {
        HospitalStyle {
            abbrev_rate: self.base_abbrev_rate + (1.0 - self.base_abbrev_rate) * self.abbrev_rate,
            length_scale: self.length_scale,
            swap_rate: self.swap_rate,
        }
    }
}

/// Every trigger, abbreviation and finding word: the stand-in medical term
/// list.
pub fn synth_dictionary(cfg: &SynthConfig) -> Result<KeywordDictionary> {
    let mut terms = BTreeSet::new();
    for s in cfg.label_specs() {
        terms.extend(s.triggers.iter().chain(&s.abbreviations).chain(&s.context).cloned());
    }
    KeywordDictionary::from_terms(terms)
}

fn fill(template: &str, mut next: impl FnMut() -> String) -> String {
    let mut out = String::new();
    let mut parts = template.split("{}");
    out.push_str(parts.next().unwrap_or(""));
    for p in parts {
        out.push_str(&next());
        out.push_str(p);
    }
    out
}

/// Knuth's method; fine for small means.
fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let l = (-mean).exp();
    let (mut k, mut p) = (0, 1.0);
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    specs: Vec<LabelSpec>,
    weights: Vec<f64>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig) -> Self {
        let specs = cfg.label_specs();
        let weights = (0..specs.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent)).collect();
        Generator { cfg, specs, weights }
    }

    fn sample_labels(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let empty = rng.gen::<f64>() < self.cfg.empty_rate;
        let u: f64 = rng.gen();
        let k = if u < 0.5 { 1 } else if u < 0.85 { 2 } else { 3 };
        let mut w = self.weights.clone();
        let mut out = Vec::new();
        for _ in 0..k.min(w.len()) {
            let total: f64 = w.iter().sum();
            let mut x = rng.gen::<f64>() * total;
            let mut pick = w.len() - 1;
            for (j, &wj) in w.iter().enumerate() {
                if x < wj {
                    pick = j;
                    break;
                }
                x -= wj;
            }
            w[pick] = 0.0;
            out.push(pick);
        }
        if empty {
            out.clear();
        }
        out.sort_unstable();
        out
    }

    fn filler_word(&self, rng: &mut ChaCha8Rng, style: &HospitalStyle) -> String {
        let (a, b) = FILLER[rng.gen_range(0..self.cfg.filler_vocab)];
        let swap = rng.gen::<f64>() < style.swap_rate;
        (if swap { b } else { a }).to_string()
    }

    /// Every random draw happens regardless of the style, so a zero-shift
    /// style reproduces hospital A exactly.
    fn note(&self, rng: &mut ChaCha8Rng, style: &HospitalStyle) -> (String, Vec<usize>) {
        let labels = self.sample_labels(rng);
        let name = PATIENT_NAMES[rng.gen_range(0..PATIENT_NAMES.len())];
        let mut sentences = Vec::new();
        let mut plan = Vec::new();
        for &j in &labels {
            let s = &self.specs[j];
            let ti = rng.gen_range(0..s.triggers.len());
            let short = rng.gen::<f64>() < style.abbrev_rate;
            let trig = if short { &s.abbreviations[ti] } else { &s.triggers[ti] };
            let c = &s.context[rng.gen_range(0..s.context.len())];
            let c2 = &s.context[rng.gen_range(0..s.context.len())];
            let tpl = TRIGGER_TEMPLATES[rng.gen_range(0..TRIGGER_TEMPLATES.len())];
            sentences.push(tpl.replace("{c2}", c2).replace("{c}", c).replace("{t}", trig));
            plan.push(PLAN_TEMPLATES[rng.gen_range(0..PLAN_TEMPLATES.len())].replace("{t}", trig));
        }
        let n_dis = poisson(rng, self.cfg.distractor_sentences);
        for _ in 0..n_dis {
            let j = rng.gen_range(0..self.specs.len());
            let s = &self.specs[j];
            let c = &s.context[rng.gen_range(0..s.context.len())];
            let tpl = DISTRACTOR_TEMPLATES[rng.gen_range(0..DISTRACTOR_TEMPLATES.len())];
            sentences.push(tpl.replace("{c}", c));
        }
        let base = rng.gen_range(self.cfg.filler_sentences / 2..=self.cfg.filler_sentences * 3 / 2);
        let n_fill = ((base as f64 * style.length_scale).round() as usize).max(1);
        for _ in 0..n_fill {
            let tpl = FILLER_TEMPLATES[rng.gen_range(0..FILLER_TEMPLATES.len())];
            sentences.push(fill(tpl, || self.filler_word(rng, style)));
        }
        sentences.shuffle(rng);
        let mut all = vec![format!("{name} presented for examination")];
        all.extend(sentences);
        all.extend(plan);
        all.push(format!("{name} discharged to owner"));
        let mut text = all.join(". ");
        text.push('.');
        (text, labels)
    }

    fn corpus(&self, rng: &mut ChaCha8Rng, style: &HospitalStyle, n: usize, prefix: &str, labeled: bool) -> Vec<NoteRecord> {
        (0..n)
            .map(|i| {
                let (text, labels) = self.note(rng, style);
                NoteRecord {
                    id: format!("{prefix}-{i:05}"),
                    text,
                    labels: if labeled {
                        labels.iter().map(|&j| self.specs[j].name.clone()).collect()
                    } else {
                        BTreeSet::new()
                    },
                }
            })
            .collect()
    }
}

/// Notes in a given style from RNG stream `stream`.
pub fn synth_notes(cfg: &SynthConfig, style: &HospitalStyle, n: usize, stream: u64, prefix: &str, labeled: bool) -> Result<Vec<NoteRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    Ok(Generator::new(cfg).corpus(&mut rng, style, n, prefix, labeled))
}

pub struct SynthCorpora {
    pub a: Dataset,
    pub b: Dataset,
    pub b_unlabeled: Dataset,
}

/// Hospital-A labeled, hospital-B labeled and hospital-B unlabeled corpora.
/// All three share the full label map.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpora> {
    let (sa, sb) = (cfg.style_a(), cfg.style_b());
    let mut labels: Vec<String> = cfg.label_specs().into_iter().map(|s| s.name).collect();
    labels.sort();
    let with_map = |records| Dataset { records, labels: labels.clone() };
    Ok(SynthCorpora {
        a: with_map(synth_notes(cfg, &sa, cfg.n_a, 1, "a", true)?),
        b: with_map(synth_notes(cfg, &sb, cfg.n_b, 2, "b", true)?),
        b_unlabeled: with_map(synth_notes(cfg, &sb, cfg.n_b_unlabeled, 3, "u", false)?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub threshold: f64,
}

impl Default for BowConfig {
    fn default() -> Self {
        BowConfig { iterations: 300, learning_rate: 1.0, l2: 1e-4, threshold: 0.5 }
    }
}

/// Dictionary-filtered term frequencies, one logistic classifier per label
/// trained by full-batch gradient descent from zero.
pub struct BowModel {
    pub vocab: Vec<String>,
    /// `m × (|vocab| + 1)`, bias last.
    pub weights: Vec<Vec<f64>>,
}

impl BowModel {
    fn features(&self, text: &str, pre: &Preprocessor) -> Vec<f64> {
        let mut x = vec![0.0; self.vocab.len()];
        for w in pre.preprocess(text) {
            if let Ok(i) = self.vocab.binary_search(&w) {
                x[i] += 1.0;
            }
        }
        x
    }

    pub fn train(train: &Dataset, dict: &KeywordDictionary, pre: &Preprocessor, cfg: &BowConfig) -> Result<Self> {
        let vocab: Vec<String> = dict.terms().map(str::to_string).collect();
        let m = train.labels.len();
        let mut model = BowModel { vocab, weights: vec![vec![0.0; 0]; m] };
        let xs: Vec<Vec<f64>> = train.records.iter().map(|r| model.features(&r.text, pre)).collect();
        let ys: Vec<LabelSet> = train.records.iter().map(|r| Dataset::label_ids(r, &train.labels)).collect::<Result<_>>()?;
        let dim = model.vocab.len() + 1;
        let n = xs.len().max(1) as f64;
        for (j, w) in model.weights.iter_mut().enumerate() {
            *w = vec![0.0; dim];
            for _ in 0..cfg.iterations {
                let mut grad = vec![0.0; dim];
                for (x, y) in xs.iter().zip(&ys) {
                    let z = x.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() + w[dim - 1];
                    let err = sigmoid(z) - if y.contains(&j) { 1.0 } else { 0.0 };
                    for (gk, xk) in grad.iter_mut().zip(x) {
                        *gk += err * xk;
                    }
                    grad[dim - 1] += err;
                }
                for (k, wk) in w.iter_mut().enumerate() {
                    let reg = if k + 1 < dim { cfg.l2 * *wk } else { 0.0 };
                    *wk -= cfg.learning_rate * (grad[k] / n + reg);
                }
            }
        }
        Ok(model)
    }

    pub fn predict_probs(&self, text: &str, pre: &Preprocessor) -> Vec<f64> {
        let x = self.features(text, pre);
        self.weights
            .iter()
            .map(|w| sigmoid(x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1]))
            .collect()
    }
}

/// Trains on `train` and reports metrics on `test` under `train`'s label map.
pub fn bow_baseline(train: &Dataset, test: &Dataset, dict: &KeywordDictionary, cfg: &BowConfig) -> Result<MetricsReport> {
    let pre = Preprocessor::default();
    let model = BowModel::train(train, dict, &pre, cfg)?;
    let preds: Vec<LabelSet> = test
        .records
        .iter()
        .map(|r| threshold(&model.predict_probs(&r.text, &pre), cfg.threshold))
        .collect();
    let golds: Vec<LabelSet> = test.records.iter().map(|r| Dataset::label_ids(r, &train.labels)).collect::<Result<_>>()?;
    MetricsReport::compute(&preds, &golds, &train.labels)
}

/// Notes per label name.
pub fn label_counts(ds: &Dataset) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in &ds.records {
        for l in &r.labels {
            *out.entry(l.clone()).or_default() += 1;
        }
    }
    out
}

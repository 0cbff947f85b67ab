//! The closed templated language: relation schema, object pools, sentence
//! templates, task prompts, and the exact sentence parser.
//!
//! Every sentence is a whitespace-separated token sequence ending in `.`.
//! Templates use `E` for the subject slot and `O` for the object slot.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    BornYear,
    BornCity,
    Occupation,
    Field,
    Award,
    Team,
    Spouse,
    DiedYear,
}

impl Relation {
    pub const ALL: [Relation; 8] = [
        Relation::BornYear,
        Relation::BornCity,
        Relation::Occupation,
        Relation::Field,
        Relation::Award,
        Relation::Team,
        Relation::Spouse,
        Relation::DiedYear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::BornYear => "born_year",
            Relation::BornCity => "born_city",
            Relation::Occupation => "occupation",
            Relation::Field => "field",
            Relation::Award => "award",
            Relation::Team => "team",
            Relation::Spouse => "spouse",
            Relation::DiedYear => "died_year",
        }
    }

    pub fn index(self) -> usize {
        Relation::ALL.iter().position(|&r| r == self).expect("listed")
    }

    /// Single-token keyword used in open-ended prompts.
    pub fn keyword(self) -> &'static str {
        match self {
            Relation::BornYear => "birth-year",
            Relation::BornCity => "birthplace",
            Relation::Occupation => "occupation",
            Relation::Field => "field",
            Relation::Award => "awards",
            Relation::Team => "team",
            Relation::Spouse => "spouse",
            Relation::DiedYear => "death-year",
        }
    }

    /// The full object domain, in popularity order (most popular first).
    pub fn pool(self) -> &'static [&'static str] {
        match self {
            Relation::BornYear => &[
                "1921", "1922", "1923", "1924", "1925", "1926", "1927", "1928", "1929", "1930", "1931", "1932",
                "1933", "1934", "1935", "1936",
            ],
            Relation::BornCity => &[
                "Aldermoor", "Brightwater", "Castlereach", "Dunmere", "Eastfold", "Fairhaven", "Glenrock",
                "Highmoor", "Ironvale", "Juniper", "Kingsbridge", "Lakeshire", "Millbrook", "Northwick",
                "Oakhurst", "Pinecrest",
            ],
            Relation::Occupation => &[
                "painter", "chemist", "novelist", "architect", "violinist", "surgeon", "sculptor", "engineer",
                "poet", "astronomer", "diplomat", "photographer", "composer", "economist", "journalist",
                "cartographer",
            ],
            Relation::Field => &[
                "geology", "linguistics", "optics", "topology", "genetics", "acoustics", "ecology",
                "cryptography", "metallurgy", "zoology", "thermodynamics", "archaeology", "hydrology", "logic",
                "virology", "seismology",
            ],
            Relation::Award => &[
                "Aster-Medal", "Beacon-Prize", "Corona-Award", "Delphi-Prize", "Ember-Medal", "Falcon-Award",
                "Granite-Prize", "Harbor-Medal", "Iris-Award", "Jade-Prize", "Kestrel-Medal", "Lumen-Award",
                "Meridian-Prize", "Nova-Medal", "Orion-Award", "Prism-Prize",
            ],
            Relation::Team => &[
                "Red-Hawks", "Blue-Herons", "Grey-Wolves", "Green-Otters", "Black-Bears", "White-Stags",
                "Silver-Foxes", "Iron-Rams", "Storm-Eagles", "River-Pikes", "Stone-Bulls", "Night-Owls",
                "Sun-Lynxes", "Frost-Elks", "Fire-Drakes", "Sea-Crabs",
            ],
            Relation::Spouse => &[
                "Adele", "Bruno", "Celia", "Dorian", "Elsa", "Felix", "Greta", "Hugo", "Ines", "Jasper", "Kira",
                "Lionel", "Mira", "Nestor", "Opal", "Pavel",
            ],
            Relation::DiedYear => &[
                "1971", "1972", "1973", "1974", "1975", "1976", "1977", "1978", "1979", "1980", "1981", "1982",
                "1983", "1984", "1985", "1986",
            ],
        }
    }

    pub fn templates(self) -> &'static [&'static str] {
        match self {
            Relation::BornYear => &[
                "E was born in O .",
                "E was born in the year O .",
                "E 's birth year is O .",
                "in O , E was born .",
                "E came into the world in O .",
                "the birth year of E is O .",
                "E entered life in O .",
                "E was born during O .",
                "O is the year E was born .",
                "E 's life began in O .",
                "E first saw daylight in O .",
                "records show E was born in O .",
            ],
            Relation::BornCity => &[
                "E was born in O .",
                "E was born in the city of O .",
                "E 's birthplace is O .",
                "E 's hometown is O .",
                "E comes from O .",
                "E grew up in O .",
                "the birthplace of E is O .",
                "O is where E was born .",
                "E was raised in O .",
                "E is a native of O .",
                "E hails from O .",
                "records show E was born in O .",
            ],
            Relation::Occupation => &[
                "E worked as a O .",
                "E was a O .",
                "E is known as a O .",
                "E 's occupation was O .",
                "E 's profession was O .",
                "E made a living as a O .",
                "by trade , E was a O .",
                "E earned fame as a O .",
                "the occupation of E was O .",
                "E trained as a O .",
                "E spent a career as a O .",
                "E served as a O .",
            ],
            Relation::Field => &[
                "E worked in the field of O .",
                "E studied O .",
                "E 's field was O .",
                "E specialized in O .",
                "E contributed to O .",
                "E was active in O .",
                "the field of E was O .",
                "E focused on O .",
                "E devoted work to O .",
                "E made advances in O .",
                "E is remembered for O .",
                "E researched O .",
            ],
            Relation::Award => &[
                "E won the O .",
                "E received the O .",
                "E was awarded the O .",
                "E earned the O .",
                "E was honored with the O .",
                "E took home the O .",
                "the O went to E .",
                "E collected the O .",
                "E was given the O .",
                "E accepted the O .",
                "E claimed the O .",
                "E 's top award was the O .",
            ],
            Relation::Team => &[
                "E played for the O .",
                "E joined the O .",
                "E was a member of the O .",
                "E belonged to the O .",
                "E signed with the O .",
                "E represented the O .",
                "E was part of the O .",
                "E competed for the O .",
                "E 's team was the O .",
                "the O signed E .",
                "E spent years with the O .",
                "E was on the O .",
            ],
            Relation::Spouse => &[
                "E married O .",
                "E was married to O .",
                "E 's spouse was O .",
                "E wed O .",
                "E 's partner was O .",
                "E shared a life with O .",
                "O married E .",
                "E tied the knot with O .",
                "E was the spouse of O .",
                "the spouse of E was O .",
                "E and O were married .",
                "E took O as a spouse .",
            ],
            Relation::DiedYear => &[
                "E died in O .",
                "E passed away in O .",
                "E 's death year was O .",
                "in O , E died .",
                "E died during O .",
                "the death of E was in O .",
                "E 's life ended in O .",
                "E passed in O .",
                "O is the year E died .",
                "E was lost in O .",
                "records show E died in O .",
                "E left this world in O .",
            ],
        }
    }

    /// Question whose short answer is the object.
    pub fn question(self) -> &'static str {
        match self {
            Relation::BornYear => "what year was E born ?",
            Relation::BornCity => "where was E born ?",
            Relation::Occupation => "what was E 's occupation ?",
            Relation::Field => "what field did E work in ?",
            Relation::Award => "what award did E win ?",
            Relation::Team => "what team did E play for ?",
            Relation::Spouse => "who did E marry ?",
            Relation::DiedYear => "what year did E die ?",
        }
    }

    /// Question that presupposes `(E, relation, O)`.
    pub fn premise_question(self) -> &'static str {
        match self {
            Relation::BornYear => "why was E born in O ?",
            Relation::BornCity => "why was E born in O ?",
            Relation::Occupation => "why did E become a O ?",
            Relation::Field => "why did E study O ?",
            Relation::Award => "why did E win the O ?",
            Relation::Team => "why did E join the O ?",
            Relation::Spouse => "why did E marry O ?",
            Relation::DiedYear => "why did E die in O ?",
        }
    }

    /// Relation whose pool contains `object`, if any.
    pub fn of_object(object: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.pool().contains(&object))
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown relation {s:?}"))
    }
}

/// One subject–relation–object fact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub entity: String,
    pub relation: Relation,
    pub object: String,
}

impl Triple {
    pub fn new(entity: impl Into<String>, relation: Relation, object: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            relation,
            object: object.into(),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.entity, self.relation, self.object)
    }
}

fn fill(template: &str, entity: &str, object: &str) -> String {
    template
        .split(' ')
        .map(|w| match w {
            "E" => entity,
            "O" => object,
            w => w,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Verbalizes `triple` with template number `template` (taken modulo the
/// number of templates).
pub fn verbalize(triple: &Triple, template: usize) -> String {
    let ts = triple.relation.templates();
    fill(ts[template % ts.len()], &triple.entity, &triple.object)
}

/// Canonical (template 0) sentence for a triple.
pub fn canonical(triple: &Triple) -> String {
    verbalize(triple, 0)
}

pub fn bio_prompt(entity: &str) -> String {
    format!("write a short biography of {entity} .")
}

pub fn open_prompt(entity: &str, relations: &[Relation]) -> String {
    let kws: Vec<&str> = relations.iter().map(|r| r.keyword()).collect();
    format!("explain {entity} , including information about {} .", kws.join(" and "))
}

pub fn question(entity: &str, relation: Relation) -> String {
    fill(relation.question(), entity, "")
}

pub fn premise_question(triple: &Triple) -> String {
    fill(triple.relation.premise_question(), &triple.entity, &triple.object)
}

/// Knowledge-detection prompt for a fact sentence.
pub fn judgment_prompt(sentence: &str) -> String {
    format!("true or false : {sentence} answer :")
}

/// Every literal (non-slot) word used by templates and prompts.
pub fn literal_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    let fixed = [
        "write a short biography of .",
        "explain , including information about and .",
        "true or false : answer :",
    ];
    let mut push_all = |s: &'static str| {
        for w in s.split(' ') {
            if w != "E" && w != "O" && !words.contains(&w) {
                words.push(w);
            }
        }
    };
    for s in fixed {
        push_all(s);
    }
    for r in Relation::ALL {
        for t in r.templates() {
            push_all(t);
        }
        push_all(r.question());
        push_all(r.premise_question());
        push_all(r.keyword());
    }
    words
}

/// Whether `token` can fill the subject slot: capitalized and not an object.
pub fn is_entity_like(token: &str) -> bool {
    token.chars().next().is_some_and(char::is_uppercase) && Relation::of_object(token).is_none()
}

struct CompiledTemplate {
    relation: Relation,
    words: Vec<&'static str>,
}

fn compiled() -> &'static [CompiledTemplate] {
    use std::sync::OnceLock;
    static TEMPLATES: OnceLock<Vec<CompiledTemplate>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        Relation::ALL
            .into_iter()
            .flat_map(|r| {
                r.templates().iter().map(move |t| CompiledTemplate {
                    relation: r,
                    words: t.split(' ').collect(),
                })
            })
            .collect()
    })
}

/// All triples a tokenized sentence (including its final `.`) can denote.
/// The grammar is unambiguous, so a well-formed sentence yields exactly one.
pub fn parse_sentence_all<S: AsRef<str>>(tokens: &[S]) -> Vec<Triple> {
    let mut found: Vec<Triple> = Vec::new();
    for t in compiled() {
        if t.words.len() != tokens.len() {
            continue;
        }
        let mut entity = None;
        let mut object = None;
        let ok = t.words.iter().zip(tokens).all(|(w, tok)| {
            let tok = tok.as_ref();
            match *w {
                "E" => {
                    entity = Some(tok);
                    is_entity_like(tok)
                }
                "O" => {
                    object = Some(tok);
                    t.relation.pool().contains(&tok)
                }
                lit => lit == tok,
            }
        });
        if ok {
            let tr = Triple::new(entity.expect("slot"), t.relation, object.expect("slot"));
            if !found.contains(&tr) {
                found.push(tr);
            }
        }
    }
    found
}

/// The unique triple of a sentence, or `None` when it does not parse.
pub fn parse_sentence<S: AsRef<str>>(tokens: &[S]) -> Option<Triple> {
    let mut all = parse_sentence_all(tokens);
    if all.len() == 1 {
        all.pop()
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_relation_has_twelve_templates_and_sixteen_objects() {
        for r in Relation::ALL {
            assert_eq!(r.templates().len(), 12, "{r}");
            assert_eq!(r.pool().len(), 16, "{r}");
            for t in r.templates() {
                assert_eq!(t.matches('E').filter(|_| true).count() >= 1, true);
                assert!(t.ends_with(" ."));
                assert_eq!(t.split(' ').filter(|w| *w == "E").count(), 1);
                assert_eq!(t.split(' ').filter(|w| *w == "O").count(), 1);
            }
        }
    }

    #[test]
    fn pools_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for r in Relation::ALL {
            for o in r.pool() {
                assert!(seen.insert(*o), "{o} shared");
            }
        }
    }

    #[test]
    fn every_template_and_object_round_trips() {
        for r in Relation::ALL {
            for (i, _) in r.templates().iter().enumerate() {
                for o in r.pool() {
                    let tr = Triple::new("Halric", r, *o);
                    let s = verbalize(&tr, i);
                    let toks: Vec<&str> = s.split(' ').collect();
                    assert_eq!(parse_sentence_all(&toks), vec![tr.clone()], "{s}");
                }
            }
        }
    }

    #[test]
    fn literals_never_look_like_entities() {
        for w in literal_words() {
            assert!(!is_entity_like(w), "{w}");
        }
    }

    #[test]
    fn wrong_slot_domain_does_not_parse() {
        assert_eq!(parse_sentence(&["Halric", "was", "born", "in", "painter", "."]), None);
        assert_eq!(parse_sentence(&["Halric", "was", "born", "in", "1971", "."]), None);
        assert_eq!(
            parse_sentence(&["Halric", "was", "born", "in", "Dunmere", "."]),
            Some(Triple::new("Halric", Relation::BornCity, "Dunmere"))
        );
    }

    #[test]
    fn prompts_render() {
        assert_eq!(bio_prompt("Halric"), "write a short biography of Halric .");
        assert_eq!(
            open_prompt("Halric", &[Relation::Award, Relation::Team]),
            "explain Halric , including information about awards and team ."
        );
        assert_eq!(question("Halric", Relation::BornYear), "what year was Halric born ?");
        assert_eq!(
            premise_question(&Triple::new("Halric", Relation::Award, "Nova-Medal")),
            "why did Halric win the Nova-Medal ?"
        );
    }
}

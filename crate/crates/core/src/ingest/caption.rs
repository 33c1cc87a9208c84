//! Tile captions from attribute counts and nearby Wikipedia articles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::remote::{Remote, DEFAULT_GEOSEARCH_RADIUS_M};
use crate::error::{Error, Result};
use crate::tilegrid::LonLat;

pub const DEFAULT_TEMPLATE: &str = "Write one short plain sentence describing the buildings, roads and land use of a \
map tile in {city}. Use only these facts.\nMap attributes: {osm}\nNearby places: {wiki}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct CaptionOptions {
    /// Whitespace-token limit applied to every final caption.
    pub token_budget: usize,
    /// Character limit on the Wikipedia text sent to the recaption model.
    pub wiki_char_budget: usize,
    pub geosearch_radius_m: f64,
    /// Prompt with `{city}`, `{osm}` and `{wiki}` placeholders.
    pub template: String,
    pub use_geosearch: bool,
    pub use_llm: bool,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        Self {
            token_budget: 77,
            wiki_char_budget: 2000,
            geosearch_radius_m: DEFAULT_GEOSEARCH_RADIUS_M,
            template: DEFAULT_TEMPLATE.into(),
            use_geosearch: false,
            use_llm: false,
        }
    }
}

impl CaptionOptions {
    pub fn validate(&self) -> Result<()> {
        if self.token_budget == 0 {
            return Err(Error::Config("caption token budget must be positive".into()));
        }
        if !(self.geosearch_radius_m >= 0.0) {
            return Err(Error::Config("geosearch radius must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBundle {
    pub osm_caption: String,
    pub wiki_caption: String,
    pub final_caption: String,
    pub city_name: String,
    /// True when the final caption came from the rule-based summary.
    pub fallback: bool,
}

pub fn truncate_tokens(text: &str, budget: usize) -> String {
    text.split_whitespace().take(budget).collect::<Vec<_>>().join(" ")
}

pub fn truncate_chars(text: &str, budget: usize) -> String {
    text.chars().take(budget).collect()
}

fn phrase(key: &str, value: &str, n: usize) -> String {
    let noun = |one: &str, many: &str| if n == 1 { one.to_string() } else { many.to_string() };
    match key {
        "building" if value == "yes" => format!("{n} {}", noun("building", "buildings")),
        "building" => format!("{n} {} {}", value.replace('_', " "), noun("building", "buildings")),
        "highway" => format!("{n} {} {}", value.replace('_', " "), noun("road", "roads")),
        "landuse" => format!("{} land use", value.replace('_', " ")),
        _ => format!("{n} {key} {}", value.replace('_', " ")),
    }
}

/// Attribute counts rendered as text, most frequent first.
pub fn osm_caption(counts: &BTreeMap<String, usize>) -> String {
    let mut items: Vec<(&String, &usize)> = counts.iter().collect();
    items.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    items
        .iter()
        .map(|(kv, n)| {
            let (k, v) = kv.split_once('=').unwrap_or((kv.as_str(), ""));
            phrase(k, v, **n)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Deterministic caption used offline or when the recaption call fails.
pub fn rule_caption(counts: &BTreeMap<String, usize>, city: &str) -> String {
    let body = osm_caption(counts);
    if body.is_empty() {
        format!("city tile of {city}")
    } else {
        format!("city tile of {city}: {body}")
    }
}

pub struct Captioner<'a> {
    pub remote: &'a Remote,
    pub options: CaptionOptions,
}

impl Captioner<'_> {
    /// Builds the caption bundle for one tile. Remote failures degrade to
    /// the rule-based caption with `fallback = true`.
    pub fn caption(&self, counts: &BTreeMap<String, usize>, center: LonLat, city: &str) -> CaptionBundle {
        let o = &self.options;
        let osm = osm_caption(counts);
        let wiki = if o.use_geosearch {
            match self.remote.geosearch(center, o.geosearch_radius_m) {
                Ok(entries) => entries
                    .iter()
                    .map(|e| format!("{}: {}", e.title, e.extract))
                    .collect::<Vec<_>>()
                    .join(" "),
                Err(e) => {
                    log::warn!("geosearch at {:.5},{:.5}: {e}", center.lon, center.lat);
                    String::new()
                }
            }
        } else {
            String::new()
        };
        let fallback = |osm: String, wiki: String| CaptionBundle {
            final_caption: truncate_tokens(&rule_caption(counts, city), o.token_budget),
            osm_caption: osm,
            wiki_caption: wiki,
            city_name: city.to_string(),
            fallback: true,
        };
        if !o.use_llm || (osm.is_empty() && wiki.is_empty()) {
            return fallback(osm, wiki);
        }
        let prompt = o
            .template
            .replace("{city}", city)
            .replace("{osm}", &osm)
            .replace("{wiki}", &truncate_chars(&wiki, o.wiki_char_budget));
        match self.remote.complete(&prompt) {
            Ok(text) if !text.trim().is_empty() => CaptionBundle {
                final_caption: truncate_tokens(&text, o.token_budget),
                osm_caption: osm,
                wiki_caption: wiki,
                city_name: city.to_string(),
                fallback: false,
            },
            Ok(_) => fallback(osm, wiki),
            Err(e) => {
                log::warn!("recaption failed, using rule-based caption: {e}");
                fallback(osm, wiki)
            }
        }
    }
}

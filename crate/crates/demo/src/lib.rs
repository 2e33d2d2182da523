//! Browser front end: three exact computations exposed to JavaScript as JSON strings.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use vidrep::decoder::DecoderClass;
use vidrep::envs::{appc_decoder_class, make_appc_instance, make_hard_instance, random_block_mdp, AppCParams, HardInstanceParams, RandomLimits};
use vidrep::oracle::{check_margin_relations, exact_video_distribution, ExactModel, PopulationOptions};
use vidrep::replearn::{erm_population, Objective};
use vidrep::Result;

const MAX_APPC_BITS: usize = 8;
const MAX_HARD_BITS: usize = 4;

/// Population losses of `phi_star` and `phi_star_xi` on the two-chain instance.
pub fn appc_report(m: usize, l: usize) -> Result<Value> {
    if m > MAX_APPC_BITS {
        return Err(vidrep::Error::InvalidParameter(format!("m is capped at {MAX_APPC_BITS} in the demo")));
    }
    let inst = make_appc_instance(&AppCParams { m, l })?;
    let class = appc_decoder_class(&inst);
    let model = ExactModel::new(&inst.spec, &inst.data_mixture)?;
    let mut rows = Vec::new();
    for obj in [Objective::Forward, Objective::Contrastive, Objective::Autoencoder] {
        let learned = erm_population(&class, &model, obj, &PopulationOptions::default())?;
        rows.push(json!({
            "objective": obj.name(),
            "phi_star": learned.losses[0],
            "phi_star_xi": learned.losses[1],
            "kl": learned.kls,
            "pick": if learned.tie { "tie" } else { learned.decoder.name.as_str() },
        }));
    }
    Ok(json!({ "m": m, "l": l, "objectives": rows }))
}

/// For each member `i` of the hard family: which bit each objective selects, and
/// how far apart the observation-only laws are.
pub fn hard_report(d: usize, p: f64) -> Result<Value> {
    if d == 0 || d > MAX_HARD_BITS {
        return Err(vidrep::Error::InvalidParameter(format!("d must be in 1..={MAX_HARD_BITS}")));
    }
    let insts = (1..=d).map(|i| make_hard_instance(&HardInstanceParams { d, p, i })).collect::<Result<Vec<_>>>()?;
    let videos = insts.iter().map(|x| exact_video_distribution(&x.spec, &x.data_mixture, None)).collect::<Result<Vec<_>>>()?;
    let mut max_tv = 0.0f64;
    for a in 0..d {
        for b in a + 1..d {
            max_tv = max_tv.max(videos[a].tv(&videos[b]));
        }
    }
    let mut members = Vec::new();
    for inst in &insts {
        let class = DecoderClass::single_factor_identities(&inst.spec, &(1..=d).collect::<Vec<_>>());
        let model = ExactModel::new(&inst.spec, &inst.data_mixture)?;
        let mut per = serde_json::Map::new();
        for obj in [Objective::Forward, Objective::Contrastive, Objective::Acro] {
            let learned = erm_population(&class, &model, obj, &PopulationOptions::default())?;
            per.insert(obj.name().into(), json!({ "losses": learned.losses, "pick": learned.decoder.name, "tie": learned.tie }));
        }
        members.push(Value::Object(per));
    }
    Ok(json!({ "d": d, "p": p, "max_video_tv": max_tv, "members": members }))
}

/// Exact margins of one random Block MDP and whether the relations between them hold.
pub fn margin_report(seed: u64) -> Result<Value> {
    let inst = random_block_mdp(seed, &RandomLimits::default())?;
    let m = ExactModel::new(&inst.spec, &inst.data_mixture)?.margins();
    let check = check_margin_relations(&m);
    Ok(json!({
        "seed": seed,
        "states": inst.spec.latent.num_states,
        "actions": inst.spec.latent.num_actions,
        "horizon": m.horizon,
        "lookahead": m.lookahead,
        "margins": m,
        "lower_factor": m.eta_min * m.eta_min / (4.0 * (m.horizon * m.horizon) as f64),
        "relations": check,
    }))
}

// ── wasm exports ───────────────────────────────────────────────────────

fn export(r: Result<Value>) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn appc_losses(m: usize, l: usize) -> std::result::Result<String, JsValue> {
    export(appc_report(m, l))
}

#[wasm_bindgen]
pub fn hard_instance(d: usize, p: f64) -> std::result::Result<String, JsValue> {
    export(hard_report(d, p))
}

#[wasm_bindgen]
pub fn margin_relation(seed: u32) -> std::result::Result<String, JsValue> {
    export(margin_report(seed as u64))
}

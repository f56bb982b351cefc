//! Gradient and edit instruction templates. Built-ins ship with the
//! crate; a config override directory replaces them by filename.

use std::path::Path;

use crate::domain::Role;

use super::Route;

const GRADIENT_ATTACK_ASR: &str = include_str!("../../templates/gradient_attack_asr.txt");
const GRADIENT_ATTACK_SCORE: &str = include_str!("../../templates/gradient_attack_score.txt");
const GRADIENT_DEFENSE_TPR: &str = include_str!("../../templates/gradient_defense_tpr.txt");
const GRADIENT_DEFENSE_TNR: &str = include_str!("../../templates/gradient_defense_tnr.txt");
const EDIT_ATTACK: &str = include_str!("../../templates/edit_attack.txt");
const EDIT_DEFENSE: &str = include_str!("../../templates/edit_defense.txt");

#[derive(Debug, Clone)]
pub struct TemplateSet {
    gradient_attack_asr: String,
    gradient_attack_score: String,
    gradient_defense_tpr: String,
    gradient_defense_tnr: String,
    edit_attack: String,
    edit_defense: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            gradient_attack_asr: GRADIENT_ATTACK_ASR.trim().to_string(),
            gradient_attack_score: GRADIENT_ATTACK_SCORE.trim().to_string(),
            gradient_defense_tpr: GRADIENT_DEFENSE_TPR.trim().to_string(),
            gradient_defense_tnr: GRADIENT_DEFENSE_TNR.trim().to_string(),
            edit_attack: EDIT_ATTACK.trim().to_string(),
            edit_defense: EDIT_DEFENSE.trim().to_string(),
        }
    }
}

impl TemplateSet {
    /// Loads overrides from a directory; files that exist replace the
    /// corresponding built-in.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::default();
        let slots: [(&str, &mut String); 6] = [
            ("gradient_attack_asr.txt", &mut set.gradient_attack_asr),
            ("gradient_attack_score.txt", &mut set.gradient_attack_score),
            ("gradient_defense_tpr.txt", &mut set.gradient_defense_tpr),
            ("gradient_defense_tnr.txt", &mut set.gradient_defense_tnr),
            ("edit_attack.txt", &mut set.edit_attack),
            ("edit_defense.txt", &mut set.edit_defense),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)?.trim().to_string();
            }
        }
        Ok(set)
    }

    pub fn gradient(&self, route: Route) -> &str {
        match route {
            Route::Asr => &self.gradient_attack_asr,
            Route::ScoreChange => &self.gradient_attack_score,
            Route::Tpr => &self.gradient_defense_tpr,
            Route::Tnr => &self.gradient_defense_tnr,
        }
    }

    pub fn edit(&self, role: Role) -> &str {
        match role {
            Role::Attacker => &self.edit_attack,
            Role::Defender => &self.edit_defense,
        }
    }
}

//! Property tests for the action grammar: render/parse round-trips, parser
//! robustness on arbitrary input, and surface-form flexibility.

use deskagent_core::action::{parse_action, render_action, Action};
use proptest::prelude::*;

fn key() -> impl Strategy<Value = String> {
    "[a-z0-9][a-z0-9_+-]{0,7}"
}

fn payload_text() -> impl Strategy<Value = String> {
    // Printable ASCII, then normalized to the trimmed single-line form the
    // grammar can carry.
    "[ -~]{0,40}".prop_map(|s| s.trim().to_string())
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        (any::<u32>(), any::<u32>()).prop_map(|(x, y)| Action::Click { x, y }),
        (any::<u32>(), any::<u32>()).prop_map(|(x, y)| Action::RightClick { x, y }),
        (any::<u32>(), any::<u32>()).prop_map(|(x, y)| Action::DoubleClick { x, y }),
        (any::<u32>(), any::<u32>(), any::<u32>(), any::<u32>())
            .prop_map(|(x1, y1, x2, y2)| Action::Drag { x1, y1, x2, y2 }),
        any::<i64>().prop_map(|offset| Action::Scroll { offset }),
        key().prop_map(|key| Action::PressKey { key }),
        proptest::collection::vec(key(), 2..=3).prop_map(|keys| Action::Hotkey { keys }),
        payload_text().prop_map(|text| Action::TypeText { text }),
        Just(Action::Wait),
        Just(Action::Finish),
        Just(Action::Fail),
    ]
}

proptest! {
    #[test]
    fn render_parse_round_trips(a in action()) {
        prop_assert!(a.validate().is_ok());
        let text = render_action(&a);
        prop_assert_eq!(parse_action(&text), Ok(a));
    }

    #[test]
    fn parser_never_panics(s in "\\PC{0,60}") {
        let _ = parse_action(&s);
    }

    #[test]
    fn keyword_case_and_padding_are_flexible(x in 0u32..5000, y in 0u32..5000) {
        let variants = [
            format!("Click ({x}, {y})"),
            format!("CLICK ( {x} ,{y} )"),
            format!("  click({x},{y})  "),
        ];
        for v in variants {
            prop_assert_eq!(parse_action(&v), Ok(Action::Click { x, y }));
        }
    }

    #[test]
    fn rendered_form_is_fixed_point(a in action()) {
        let once = render_action(&a);
        let twice = render_action(&parse_action(&once).unwrap());
        prop_assert_eq!(once, twice);
    }
}

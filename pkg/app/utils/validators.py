from typing import Tuple


def validate_fraction(value: float, name: str, allow_one: bool = True) -> Tuple[bool, str]:
    if value != value:
        return False, f"{name} is NaN"

    if value <= 0.0:
        return False, f"{name} must be > 0, got {value}"

    if value > 1.0 or (value == 1.0 and not allow_one):
        bound = "<= 1" if allow_one else "< 1"
        return False, f"{name} must be {bound}, got {value}"

    return True, ""


def validate_probability(value: float, name: str, open_low: bool = True, open_high: bool = True) -> Tuple[bool, str]:
    low_ok = value > 0.0 if open_low else value >= 0.0
    high_ok = value < 1.0 if open_high else value <= 1.0
    if not (low_ok and high_ok):
        low = "(" if open_low else "["
        high = ")" if open_high else "]"
        return False, f"{name} must lie in {low}0, 1{high}, got {value}"
    return True, ""


def validate_top_k(k: int) -> Tuple[bool, str]:
    if int(k) != k or k < 1:
        return False, f"K must be an integer >= 1, got {k}"
    return True, ""


def ensure(check: Tuple[bool, str]) -> None:
    """Raise ValueError for a failed validator result."""
    is_valid, error_msg = check
    if not is_valid:
        raise ValueError(error_msg)

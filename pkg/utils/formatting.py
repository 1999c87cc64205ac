# acrkn/utils/formatting.py

# round-trip precision for every float written to CSV
CSV_FLOAT_FORMAT = "%.17g"


def format_metric(x: float | None, digits: int = 4) -> str:
    """
    Format a loss or error for tables. None and NaN render as "-".
    Example: 0.0123456 -> "0.01235", 1234.5 -> "1234"
    """
    if x is None or x != x:
        return "-"
    return f"{x:.{digits}g}"


def format_duration(ms: int) -> str:
    """
    Milliseconds to a short human string.
    Example: 950 -> "950 ms", 61500 -> "1m 1.5s"
    """
    if ms < 1000:
        return f"{ms} ms"
    seconds = ms / 1000.0
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, rest = divmod(seconds, 60)
    return f"{int(minutes)}m {rest:.1f}s"

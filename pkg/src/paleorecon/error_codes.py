error_dict = {
    0: "OK",
    1: "UNKNOWN",
    2: "CONFIG",
    3: "INGEST",
    4: "SCREEN",
    5: "REDUCE",
    6: "FIT",
    7: "VALIDATE",
    8: "RECONSTRUCT",
    9: "COMPARE",
    10: "GENERATE",
    11: "EXPORT",
}

stage_codes = {name: code for code, name in error_dict.items()}

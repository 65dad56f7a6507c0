def get_all_selfcheck_rules():
    # without this delayed import, the rules could not import our sub-modules (e.g. `rule`)
    from . import C3_1, G4_1, O1_1, O1_2, O1_3, O1_4, O1_5, P2_1, P2_2

    return {
        "O1.1": O1_1,
        "O1.2": O1_2,
        "O1.3": O1_3,
        "O1.4": O1_4,
        "O1.5": O1_5,
        "P2.1": P2_1,
        "P2.2": P2_2,
        "C3.1": C3_1,
        "G4.1": G4_1,
    }

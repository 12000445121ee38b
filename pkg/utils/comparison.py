import argparse
import logging
from typing import Dict, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def compare_csv_files(file1_path: str, file2_path: str, tolerance: float = 0.0) -> Tuple[bool, Dict]:
    """
    Compare two result CSV files (trajectories, spectra, eigenphases, epsilon tables).

    Args:
        file1_path: Path to first CSV file
        file2_path: Path to second CSV file
        tolerance: Relative tolerance for numeric columns; 0 asks for bit-for-bit equality

    Returns:
        Tuple containing:
        - Boolean indicating if files match
        - Dictionary with detailed comparison results
    """
    try:
        df1 = pd.read_csv(file1_path)
        df2 = pd.read_csv(file2_path)
    except (OSError, pd.errors.ParserError) as e:
        logger.error(f"Error comparing CSV files: {str(e)}")
        raise

    results = {
        "are_similar": False,
        "differences": {},
        "shape_match": False,
        "columns_match": False,
        "data_match": False,
        "max_relative_difference": 0.0,
    }

    if df1.shape != df2.shape:
        results["differences"]["shape"] = {"file1": df1.shape, "file2": df2.shape}
        return False, results
    results["shape_match"] = True

    if list(df1.columns) != list(df2.columns):
        results["differences"]["columns"] = {
            "file1_columns": list(df1.columns),
            "file2_columns": list(df2.columns),
            "missing_in_file1": sorted(set(df2.columns) - set(df1.columns)),
            "missing_in_file2": sorted(set(df1.columns) - set(df2.columns)),
        }
        return False, results
    results["columns_match"] = True

    data_differences = {}
    for column in df1.columns:
        left, right = df1[column], df2[column]
        if pd.api.types.is_numeric_dtype(left) and pd.api.types.is_numeric_dtype(right):
            a = left.to_numpy(dtype=float)
            b = right.to_numpy(dtype=float)
            scale = np.maximum(np.abs(a), np.abs(b))
            gap = np.abs(a - b)
            relative = np.divide(gap, scale, out=np.zeros_like(gap), where=scale > 0)
            both_nan = np.isnan(a) & np.isnan(b)
            relative[both_nan] = 0.0
            relative[np.isnan(relative)] = np.inf
            results["max_relative_difference"] = max(results["max_relative_difference"], float(relative.max(initial=0.0)))
            exact = tolerance == 0.0
            mismatch = (a != b) & ~both_nan if exact else relative > tolerance
            if mismatch.any():
                rows = np.flatnonzero(mismatch)[:5]
                data_differences[column] = {
                    int(idx): {"file1": float(a[idx]), "file2": float(b[idx])} for idx in rows
                }
        else:
            mask = left.fillna("").astype(str) != right.fillna("").astype(str)
            if mask.any():
                diff_indices = mask[mask].index.tolist()
                data_differences[column] = {
                    idx: {"file1": str(left.loc[idx]), "file2": str(right.loc[idx])}
                    for idx in diff_indices[:5]  # first 5
                }

    if data_differences:
        results["differences"]["data"] = data_differences
        return False, results

    results["are_similar"] = True
    results["data_match"] = True
    return True, results


def print_comparison_results(results: Dict) -> None:
    """
    Print formatted comparison results.

    Args:
        results: Dictionary containing comparison results
    """
    print("\nCSV Comparison Results:")
    print("-" * 50)

    print(f"Files are {'identical' if results['are_similar'] else 'different'}")
    print(f"Shape match: {results['shape_match']}")
    print(f"Columns match: {results['columns_match']}")
    print(f"Data match: {results['data_match']}")
    print(f"Max relative difference: {results['max_relative_difference']:.3e}")

    if results["differences"]:
        print("\nDifferences found:")
        for diff_type, details in results["differences"].items():
            print(f"\n{diff_type.capitalize()} differences:")
            print(details)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Check that two experiment runs wrote the same CSV.")
    parser.add_argument("file1", help="CSV from the first run.")
    parser.add_argument("file2", help="CSV from the rerun.")
    parser.add_argument("--tolerance", type=float, default=0.0, help="Relative tolerance; 0 means bit-for-bit.")
    args = parser.parse_args()

    are_similar, results = compare_csv_files(args.file1, args.file2, args.tolerance)
    print_comparison_results(results)
    raise SystemExit(0 if are_similar else 1)

import os
import shutil

# Generated artifacts live under data/; READMEs and other hand-written files stay.
DATA_DIR = "data"
DATASETS_DIR = os.path.join(DATA_DIR, "datasets")
RUNS_DIR = os.path.join(DATA_DIR, "runs")
REPORTS_DIR = os.path.join(DATA_DIR, "reports")
GENERATED_DIRS = (DATASETS_DIR, RUNS_DIR, REPORTS_DIR)


def setup_directories(data_dir=DATA_DIR):
    """Ensures that the artifact directories exist."""
    for path in GENERATED_DIRS:
        os.makedirs(os.path.join(data_dir, os.path.relpath(path, DATA_DIR)), exist_ok=True)


def clear_generated_data_files(data_dir=DATA_DIR):
    """
    Deletes generated datasets, training runs and reports under data_dir, preserving the
    directory structure and files such as README.txt.

    Returns:
        int: Number of removed entries.
    """
    print("이전 데이터를 삭제합니다...")
    removed = 0
    for path in GENERATED_DIRS:
        target = os.path.join(data_dir, os.path.relpath(path, DATA_DIR))
        if not os.path.exists(target):
            continue
        for item in sorted(os.listdir(target)):
            if item.lower().startswith("readme"):
                continue
            item_path = os.path.join(target, item)
            try:
                if os.path.isdir(item_path):
                    shutil.rmtree(item_path)
                else:
                    os.remove(item_path)
                removed += 1
                print(f" - 삭제됨: {item_path}")
            except OSError as e:
                print(f"오류: {item_path} 삭제 실패. {e}")

    print("이전 데이터 파일 삭제 완료.")
    return removed


if __name__ == '__main__':
    clear_generated_data_files()

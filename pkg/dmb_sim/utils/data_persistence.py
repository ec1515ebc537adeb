import asyncio
import json
import time
import uuid
from pathlib import Path
from typing import Any, Dict, List, Optional

import aiosqlite
from loguru import logger


class RunDatabase:
    """
    运行记录数据库

    功能包括：
    - 每次完成的实验保存一行（配置、CSV 路径与摘要、汇总）
    - 每次重放保存一条判定
    - 按时间倒序列出历史运行

    数据库表结构：
    - runs: 运行记录
    - replays: 重放判定
    - system_config: 表结构版本
    """

    def __init__(self, db_path: Path):
        """
        初始化数据库管理器

        Args:
            db_path: 数据库文件路径
        """
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)

        self.schema_version = 1

        self.db_connection: Optional[aiosqlite.Connection] = None
        self.connection_lock = asyncio.Lock()

    async def initialize(self):
        """建立持久连接并创建表结构"""
        try:
            logger.debug(f"🔧 初始化运行数据库: {self.db_path}")
            async with self.connection_lock:
                self.db_connection = await aiosqlite.connect(str(self.db_path))
                self.db_connection.row_factory = aiosqlite.Row

                await self.db_connection.execute("PRAGMA foreign_keys = ON")
                await self.db_connection.execute("PRAGMA journal_mode = WAL")
                await self.db_connection.execute("PRAGMA synchronous = NORMAL")
                await self.db_connection.execute("PRAGMA busy_timeout = 30000")

                await self._create_tables(self.db_connection)
                await self._create_indexes(self.db_connection)
                await self._check_schema_version(self.db_connection)
                await self.db_connection.commit()
            logger.debug(f"✅ 运行数据库就绪: {self.db_path}")

        except Exception as e:
            logger.error(f"💥 运行数据库初始化失败: {e}")
            if self.db_connection:
                try:
                    await self.db_connection.close()
                except Exception:
                    pass
                self.db_connection = None
            raise

    async def _create_tables(self, db: aiosqlite.Connection):
        await db.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                command TEXT NOT NULL,
                seed INTEGER NOT NULL,
                config TEXT NOT NULL,
                csv_path TEXT,
                csv_sha256 TEXT,
                summary TEXT DEFAULT '{}',
                created_at REAL NOT NULL
            )
        """)

        # 重放可以针对不在本库中的摘要文件，因此不设外键
        await db.execute("""
            CREATE TABLE IF NOT EXISTS replays (
                replay_id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT,
                summary_path TEXT NOT NULL,
                passed INTEGER NOT NULL,
                first_divergent_row INTEGER,
                csv_sha256 TEXT,
                created_at REAL NOT NULL
            )
        """)

        await db.execute("""
            CREATE TABLE IF NOT EXISTS system_config (
                config_key TEXT PRIMARY KEY,
                config_value TEXT NOT NULL,
                updated_at REAL DEFAULT 0
            )
        """)

    async def _create_indexes(self, db: aiosqlite.Connection):
        indexes = [
            "CREATE INDEX IF NOT EXISTS idx_runs_created_at ON runs(created_at)",
            "CREATE INDEX IF NOT EXISTS idx_runs_command ON runs(command)",
            "CREATE INDEX IF NOT EXISTS idx_replays_run_id ON replays(run_id)",
        ]
        for index_sql in indexes:
            await db.execute(index_sql)

    async def _check_schema_version(self, db: aiosqlite.Connection):
        cursor = await db.execute("SELECT config_value FROM system_config WHERE config_key = 'schema_version'")
        result = await cursor.fetchone()

        if result:
            current_version = int(result[0])
        else:
            current_version = self.schema_version
            await db.execute("INSERT INTO system_config (config_key, config_value, updated_at) VALUES (?, ?, ?)",
                             ('schema_version', str(self.schema_version), time.time()))

        if current_version < self.schema_version:
            await self._upgrade_schema(db, current_version, self.schema_version)

    async def _upgrade_schema(self, db: aiosqlite.Connection, from_version: int, to_version: int):
        logger.info(f"升级运行数据库结构: {from_version} -> {to_version}")
        await db.execute("UPDATE system_config SET config_value = ?, updated_at = ? WHERE config_key = 'schema_version'",
                         (str(to_version), time.time()))

    # ==================== 连接管理 ====================

    async def _get_connection(self) -> aiosqlite.Connection:
        """获取持久连接，不存在时先初始化"""
        if not self.db_connection:
            await self.initialize()
        return self.db_connection

    async def _execute_with_retry(self, operation, max_retries: int = 3):
        """
        带重试机制的数据库操作

        Args:
            operation: 接收连接的协程函数
            max_retries: 最大重试次数

        Returns:
            操作结果
        """
        last_error = None

        for attempt in range(max_retries):
            try:
                if not self.db_connection:
                    await self.initialize()
                async with self.connection_lock:
                    return await operation(self.db_connection)

            except aiosqlite.Error as e:
                last_error = e
                logger.warning(f"数据库操作失败，尝试 {attempt + 1}/{max_retries}: {e}")
                if "database is locked" in str(e):
                    await asyncio.sleep(0.1 * (attempt + 1))
                    continue
                break

        raise last_error

    # ==================== 辅助方法 ====================

    def _safe_json_loads(self, json_str: Optional[str], default_value):
        if not json_str:
            return default_value
        try:
            return json.loads(json_str)
        except (json.JSONDecodeError, TypeError):
            logger.warning(f"JSON 解析失败，使用默认值: {json_str[:50]}")
            return default_value

    def _row_to_run_dict(self, row) -> Dict[str, Any]:
        return {
            'run_id': row['run_id'],
            'command': row['command'],
            'seed': row['seed'],
            'config': self._safe_json_loads(row['config'], {}),
            'csv_path': row['csv_path'],
            'csv_sha256': row['csv_sha256'],
            'summary': self._safe_json_loads(row['summary'], {}),
            'created_at': row['created_at'],
        }

    # ==================== 运行记录 ====================

    @staticmethod
    def new_run_id() -> str:
        return uuid.uuid4().hex[:12]

    async def save_run(self, run_id: str, command: str, seed: int, config: Dict[str, Any],
                       csv_path: Optional[Path], csv_sha256: Optional[str], summary: Dict[str, Any]) -> str:
        """
        保存一次运行

        Args:
            run_id: 运行 ID
            command: 命令名
            seed: 随机种子
            config: 完整配置
            csv_path: CSV 路径（bounds/speedup 为 None）
            csv_sha256: CSV 的 SHA-256
            summary: 汇总

        Returns:
            str: 运行 ID
        """
        async def _save_operation(db: aiosqlite.Connection) -> str:
            await db.execute("""
                INSERT OR REPLACE INTO runs (run_id, command, seed, config, csv_path, csv_sha256, summary, created_at)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """, (
                run_id,
                command,
                seed,
                json.dumps(config, sort_keys=True),
                str(csv_path) if csv_path else None,
                csv_sha256,
                json.dumps(summary, sort_keys=True),
                time.time(),
            ))
            await db.commit()
            return run_id

        try:
            result = await self._execute_with_retry(_save_operation)
            logger.debug(f"💾 运行记录已保存: {run_id} ({command})")
            return result
        except aiosqlite.Error as e:
            logger.error(f"💥 保存运行记录失败 {run_id}: {e}")
            raise

    async def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        async def _get_operation(db: aiosqlite.Connection) -> Optional[Dict[str, Any]]:
            cursor = await db.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,))
            row = await cursor.fetchone()
            return self._row_to_run_dict(row) if row else None

        return await self._execute_with_retry(_get_operation)

    async def list_runs(self, limit: int = 20, command: Optional[str] = None) -> List[Dict[str, Any]]:
        """
        按时间倒序列出运行

        Args:
            limit: 最多返回条数
            command: 只列出该命令的运行

        Returns:
            List[Dict]: 运行记录列表
        """
        async def _list_operation(db: aiosqlite.Connection) -> List[Dict[str, Any]]:
            if command:
                cursor = await db.execute(
                    "SELECT * FROM runs WHERE command = ? ORDER BY created_at DESC LIMIT ?", (command, limit))
            else:
                cursor = await db.execute("SELECT * FROM runs ORDER BY created_at DESC LIMIT ?", (limit,))
            rows = await cursor.fetchall()
            return [self._row_to_run_dict(row) for row in rows]

        return await self._execute_with_retry(_list_operation)

    # ==================== 重放记录 ====================

    async def record_replay(self, run_id: Optional[str], summary_path: Path, passed: bool,
                            first_divergent_row: Optional[int], csv_sha256: Optional[str]) -> None:
        async def _record_operation(db: aiosqlite.Connection) -> None:
            await db.execute("""
                INSERT INTO replays (run_id, summary_path, passed, first_divergent_row, csv_sha256, created_at)
                VALUES (?, ?, ?, ?, ?, ?)
            """, (run_id, str(summary_path), 1 if passed else 0, first_divergent_row, csv_sha256, time.time()))
            await db.commit()

        await self._execute_with_retry(_record_operation)
        logger.debug(f"重放判定已记录: {run_id} -> {'PASS' if passed else 'FAIL'}")

    async def list_replays(self, run_id: str) -> List[Dict[str, Any]]:
        async def _list_operation(db: aiosqlite.Connection) -> List[Dict[str, Any]]:
            cursor = await db.execute(
                "SELECT * FROM replays WHERE run_id = ? ORDER BY replay_id", (run_id,))
            rows = await cursor.fetchall()
            return [{
                'run_id': row['run_id'],
                'summary_path': row['summary_path'],
                'passed': bool(row['passed']),
                'first_divergent_row': row['first_divergent_row'],
                'csv_sha256': row['csv_sha256'],
                'created_at': row['created_at'],
            } for row in rows]

        return await self._execute_with_retry(_list_operation)

    async def close(self):
        """关闭持久连接"""
        async with self.connection_lock:
            if self.db_connection:
                try:
                    await self.db_connection.close()
                    logger.debug("运行数据库连接已关闭")
                except aiosqlite.Error as e:
                    logger.error(f"关闭数据库连接失败: {e}")
                finally:
                    self.db_connection = None
